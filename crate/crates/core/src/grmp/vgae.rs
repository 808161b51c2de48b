//! Variational graph autoencoder: two-layer GCN encoder producing Gaussian
//! latents, inner-product decoder, ELBO loss with hand-derived gradients.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::UpdateGraph;
use crate::error::{Error, Result};
use crate::rng::rng_from;

const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct VgaeParams {
    /// Optional fixed random projection `d x p` applied to node features
    /// before the first layer.
    pub projection: Option<Array2<f64>>,
    /// First GCN layer, `p x hidden` (`p = d` without projection).
    pub w0: Array2<f64>,
    /// Mean head, `hidden x latent`.
    pub w_mu: Array2<f64>,
    /// Log-variance head, `hidden x latent`.
    pub w_logvar: Array2<f64>,
}

impl VgaeParams {
    pub fn input_dim(&self) -> usize {
        match &self.projection {
            Some(p) => p.nrows(),
            None => self.w0.nrows(),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w0.ncols()
    }

    pub fn latent(&self) -> usize {
        self.w_mu.ncols()
    }

    /// Xavier-uniform weights. `projection_dim > 0` adds a seeded Gaussian
    /// projection scaled by `1/sqrt(projection_dim)`.
    pub fn init(d: usize, hidden: usize, latent: usize, projection_dim: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed, &[]);
        let projection = (projection_dim > 0).then(|| {
            let scale = 1.0 / (projection_dim as f64).sqrt();
            Array2::from_shape_simple_fn((d, projection_dim), || {
                scale * rng.sample::<f64, _>(StandardNormal)
            })
        });
        let p = if projection_dim > 0 {
            projection_dim
        } else {
            d
        };
        let mut xavier = |rows: usize, cols: usize| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-limit..limit))
        };
        let w0 = xavier(p, hidden);
        let w_mu = xavier(hidden, latent);
        let w_logvar = xavier(hidden, latent);
        Self {
            projection,
            w0,
            w_mu,
            w_logvar,
        }
    }

    fn check(&self, g: &UpdateGraph) -> Result<()> {
        if g.x.ncols() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: g.x.ncols(),
            });
        }
        if g.adjacency.dim() != (g.n(), g.n()) {
            return Err(Error::Dimension {
                expected: g.n(),
                got: g.adjacency.nrows(),
            });
        }
        Ok(())
    }
}

/// `D^-1/2 (A + I) D^-1/2` with `D` the degree matrix of `A + I`.
pub fn normalized_adjacency(adjacency: &Array2<f64>) -> Array2<f64> {
    let n = adjacency.nrows();
    let a = adjacency + &Array2::<f64>::eye(n);
    let inv_sqrt: Vec<f64> = a.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| a[[i, j]] * inv_sqrt[i] * inv_sqrt[j])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub mu: Array2<f64>,
    pub logvar: Array2<f64>,
}

/// Encoder intermediates kept for the backward pass.
struct Forward {
    a_norm: Array2<f64>,
    ax: Array2<f64>,
    pre: Array2<f64>,
    ah: Array2<f64>,
    enc: Encoding,
}

fn forward(params: &VgaeParams, g: &UpdateGraph) -> Result<Forward> {
    params.check(g)?;
    let a_norm = normalized_adjacency(&g.adjacency);
    let features = match &params.projection {
        Some(p) => g.x.dot(p),
        None => g.x.clone(),
    };
    let ax = a_norm.dot(&features);
    let pre = ax.dot(&params.w0);
    let h = pre.mapv(|v| v.max(0.0));
    let ah = a_norm.dot(&h);
    let mu = ah.dot(&params.w_mu);
    let logvar = ah.dot(&params.w_logvar);
    Ok(Forward {
        a_norm,
        ax,
        pre,
        ah,
        enc: Encoding { mu, logvar },
    })
}

pub fn vgae_encode(params: &VgaeParams, g: &UpdateGraph) -> Result<Encoding> {
    Ok(forward(params, g)?.enc)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Edge probabilities `sigmoid(Z Z^T)`.
pub fn vgae_decode(z: &Array2<f64>) -> Array2<f64> {
    let n = z.nrows();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let p = sigmoid(z.row(i).dot(&z.row(j)));
            out[[i, j]] = p;
            out[[j, i]] = p;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VgaeLoss {
    pub total: f64,
    pub recon_bce: f64,
    pub kl: f64,
}

/// `#non-edges / #edges` over off-diagonal entries, 1 when edgeless.
pub fn positive_weight(adjacency: &Array2<f64>) -> f64 {
    let n = adjacency.nrows();
    let pairs = (n * n.saturating_sub(1)) as f64;
    let edges: f64 = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| i != j && adjacency[[i, j]] != 0.0)
        .count() as f64;
    if edges == 0.0 {
        1.0
    } else {
        (pairs - edges) / edges
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Weighted BCE averaged over off-diagonal entries.
pub fn recon_bce(a_hat: &Array2<f64>, adjacency: &Array2<f64>, pos_weight: f64) -> f64 {
    let n = a_hat.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let p = clamp_prob(a_hat[[i, j]]);
            let a = adjacency[[i, j]];
            total -= pos_weight * a * p.ln() + (1.0 - a) * (1.0 - p).ln();
        }
    }
    total / (n * (n - 1)) as f64
}

pub fn kl_divergence(mu: &Array2<f64>, logvar: &Array2<f64>) -> f64 {
    let n = mu.nrows() as f64;
    let s: f64 = Zip::from(mu)
        .and(logvar)
        .fold(0.0, |acc, &m, &lv| acc + 1.0 + lv - m * m - lv.exp());
    -0.5 * s / n
}

pub fn vgae_loss(
    a_hat: &Array2<f64>,
    adjacency: &Array2<f64>,
    mu: &Array2<f64>,
    logvar: &Array2<f64>,
) -> Result<VgaeLoss> {
    let n = adjacency.nrows();
    if a_hat.dim() != (n, n) || mu.dim() != logvar.dim() || mu.nrows() != n {
        return Err(Error::InvalidInput("vgae_loss: shape mismatch".into()));
    }
    let recon = recon_bce(a_hat, adjacency, positive_weight(adjacency));
    let kl = kl_divergence(mu, logvar);
    Ok(VgaeLoss {
        total: recon + kl,
        recon_bce: recon,
        kl,
    })
}

/// Reconstruction loss of `decode(z)` against `adjacency` and its gradient
/// with respect to `z`.
pub fn recon_and_grad_z(z: &Array2<f64>, adjacency: &Array2<f64>) -> (f64, Array2<f64>) {
    let n = z.nrows();
    let pw = positive_weight(adjacency);
    let a_hat = vgae_decode(z);
    let recon = recon_bce(&a_hat, adjacency, pw);
    if n < 2 {
        return (recon, Array2::zeros(z.dim()));
    }
    let scale = 1.0 / (n * (n - 1)) as f64;
    let mut ds = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let p = a_hat[[i, j]];
            if p <= PROB_CLAMP || p >= 1.0 - PROB_CLAMP {
                continue;
            }
            let a = adjacency[[i, j]];
            ds[[i, j]] = scale * (pw * a * (p - 1.0) + (1.0 - a) * p);
        }
    }
    let sym = &ds + &ds.t();
    (recon, sym.dot(z))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VgaeGrads {
    pub w0: Array2<f64>,
    pub w_mu: Array2<f64>,
    pub w_logvar: Array2<f64>,
}

/// Loss at `Z = mu + exp(logvar / 2) * eps` and gradients for all weights.
pub fn loss_and_grads(
    params: &VgaeParams,
    g: &UpdateGraph,
    eps: &Array2<f64>,
) -> Result<(VgaeLoss, VgaeGrads)> {
    let fw = forward(params, g)?;
    let Encoding { mu, logvar } = &fw.enc;
    if eps.dim() != mu.dim() {
        return Err(Error::InvalidInput(
            "noise shape does not match latents".into(),
        ));
    }
    let n = g.n() as f64;
    let std = logvar.mapv(|lv| (0.5 * lv).exp());
    let z = mu + &(&std * eps);

    let (recon, dz) = recon_and_grad_z(&z, &g.adjacency);
    let kl = kl_divergence(mu, logvar);

    let dmu = &dz + &(mu / n);
    let dlogvar = &(&dz * eps * &std * 0.5) - &(logvar.mapv(|lv| 1.0 - lv.exp()) * (0.5 / n));

    let w_mu = fw.ah.t().dot(&dmu);
    let w_logvar = fw.ah.t().dot(&dlogvar);
    let dah = dmu.dot(&params.w_mu.t()) + dlogvar.dot(&params.w_logvar.t());
    let dh = fw.a_norm.t().dot(&dah);
    let dpre = Zip::from(&dh)
        .and(&fw.pre)
        .map_collect(|&g, &p| if p > 0.0 { g } else { 0.0 });
    let w0 = fw.ax.t().dot(&dpre);

    Ok((
        VgaeLoss {
            total: recon + kl,
            recon_bce: recon,
            kl,
        },
        VgaeGrads { w0, w_mu, w_logvar },
    ))
}

pub fn sample_noise(n: usize, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, k), || rng.sample::<f64, _>(StandardNormal))
}

/// Full-batch gradient descent on the summed ELBO over `graphs`.
pub fn fit_vgae(
    graphs: &[UpdateGraph],
    hidden: usize,
    latent: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<VgaeParams> {
    fit_vgae_projected(graphs, hidden, latent, 0, epochs, lr, seed)
}

pub fn fit_vgae_projected(
    graphs: &[UpdateGraph],
    hidden: usize,
    latent: usize,
    projection_dim: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<VgaeParams> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::InvalidInput("fit_vgae needs at least one graph".into()))?;
    let d = first.x.ncols();
    if let Some(g) = graphs.iter().find(|g| g.x.ncols() != d) {
        return Err(Error::Dimension {
            expected: d,
            got: g.x.ncols(),
        });
    }
    let input = if projection_dim > 0 {
        projection_dim
    } else {
        d
    };
    if latent == 0 || latent > hidden || hidden > input {
        return Err(Error::InvalidInput(format!(
            "vgae needs 1 <= latent <= hidden <= input dim (latent {latent}, hidden {hidden}, input {input})"
        )));
    }
    let mut params = VgaeParams::init(d, hidden, latent, projection_dim, seed);
    let mut rng = rng_from(seed, &[1]);
    for _ in 0..epochs {
        let mut total = VgaeGrads {
            w0: Array2::zeros(params.w0.dim()),
            w_mu: Array2::zeros(params.w_mu.dim()),
            w_logvar: Array2::zeros(params.w_logvar.dim()),
        };
        for g in graphs {
            let eps = sample_noise(g.n(), latent, &mut rng);
            let (_, grads) = loss_and_grads(&params, g, &eps)?;
            total.w0 += &grads.w0;
            total.w_mu += &grads.w_mu;
            total.w_logvar += &grads.w_logvar;
        }
        params.w0.scaled_add(-lr, &total.w0);
        params.w_mu.scaled_add(-lr, &total.w_mu);
        params.w_logvar.scaled_add(-lr, &total.w_logvar);
    }
    Ok(params)
}

/// Monte-Carlo ELBO with a fixed noise set, for comparing parameter sets
/// under common random numbers.
pub fn expected_loss(
    params: &VgaeParams,
    graphs: &[UpdateGraph],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = rng_from(seed, &[2]);
    let mut total = 0.0;
    for g in graphs {
        for _ in 0..samples {
            let eps = sample_noise(g.n(), params.latent(), &mut rng);
            total += loss_and_grads(params, g, &eps)?.0.total;
        }
    }
    Ok(total / samples as f64)
}
