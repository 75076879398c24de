//! Finite-difference verification of the analytic backward pass.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{MqaConfig, Variant};
use crate::nn::{self, GradientSet, Params, StateSource, TensorKind, Trace};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub model: MqaConfig,
    /// Central-difference step.
    pub h: f64,
    pub tolerance: f64,
    /// Tensors larger than this are checked on a seeded subsample.
    pub samples_per_tensor: usize,
    /// Seeds the parameter draw and the subsample.
    pub seed: u64,
    /// Half-width of the uniform draw for every weight and bias.
    pub param_scale: f64,
}

impl GradCheckConfig {
    /// N=7, d_embed=3, d_hidden=4, d_fuse=5, d_img=6.
    pub fn tiny(variant: Variant) -> Self {
        GradCheckConfig {
            model: MqaConfig {
                n: 7,
                d_embed: 3,
                d_hidden: 4,
                d_fuse: 5,
                d_img: 6,
                variant,
                ..MqaConfig::default()
            },
            h: 1e-5,
            tolerance: 1e-4,
            samples_per_tensor: 500,
            // Unit-scale parameters keep every gradient well above the
            // roundoff floor of a central difference at h = 1e-5.
            seed: 2,
            param_scale: 1.0,
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub size: usize,
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub variant: Variant,
    pub tolerance: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.max_relative_error <= self.tolerance)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.max_relative_error)
            .fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "gradcheck {} (tolerance {:e})",
            self.variant, self.tolerance
        )?;
        for t in &self.tensors {
            writeln!(
                f,
                "  {:<4} {:<28} {:>5}/{:<5} max rel {:.3e}",
                if t.max_relative_error <= self.tolerance {
                    "ok"
                } else {
                    "FAIL"
                },
                t.name,
                t.checked,
                t.size,
                t.max_relative_error
            )?;
        }
        write!(f, "{}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Fixed question/answer/image used for every check.
pub struct Fixture {
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub image: Vec<f64>,
}

impl Fixture {
    /// Token ids are taken modulo `n` (skipping the specials) so any
    /// vocabulary of size ≥ 4 works.
    pub fn for_config(cfg: &MqaConfig) -> Self {
        let word = |k: usize| 2 + k % (cfg.n - 2);
        Fixture {
            question: vec![word(1), word(3), word(2), word(4)],
            answer: vec![word(4), word(0), word(3)],
            image: (0..cfg.d_img)
                .map(|i| ((i * 7 + 3) % 11) as f64 / 5.5 - 1.0)
                .collect(),
        }
    }
}

/// Parameters drawn uniformly in `±param_scale`, biases included.
pub fn fixture_params(cfg: &GradCheckConfig) -> Params {
    let mut p = Params::zeros(&cfg.model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    p.init_uniform(&mut rng, cfg.param_scale);
    for t in p.tensors_mut() {
        if t.kind == TensorKind::Bias {
            for x in t.data.iter_mut() {
                *x = rng.gen_range(-cfg.param_scale..cfg.param_scale);
            }
        }
    }
    p
}

pub fn gradient_check(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    gradient_check_with(cfg, |p, trace| nn::backward(p, trace, 1.0))
}

/// Checks `grad_fn` against central differences of the forward loss.
/// Exposed so the checker itself can be tested against a broken backward.
pub fn gradient_check_with<G>(cfg: &GradCheckConfig, grad_fn: G) -> Result<GradCheckReport>
where
    G: Fn(&Params, &Trace) -> Result<GradientSet>,
{
    cfg.model.validate()?;
    let fx = Fixture::for_config(&cfg.model);
    let source: StateSource = cfg.model.state_source;
    let image = cfg
        .model
        .variant
        .uses_image()
        .then_some(fx.image.as_slice());
    let loss = |p: &Params| -> Result<f64> {
        Ok(nn::forward(p, source, &fx.question, image, &fx.answer)?.loss)
    };

    let mut params = fixture_params(cfg);
    let trace = nn::forward(&params, source, &fx.question, image, &fx.answer)?;
    let grads = grad_fn(&params, &trace)?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.data.to_vec()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut tensors = Vec::with_capacity(analytic.len());
    for (ti, (name, a)) in analytic.iter().enumerate() {
        let indices: Vec<usize> = if a.len() <= cfg.samples_per_tensor {
            (0..a.len()).collect()
        } else {
            let mut s =
                rand::seq::index::sample(&mut rng, a.len(), cfg.samples_per_tensor).into_vec();
            s.sort_unstable();
            s
        };
        let mut check = TensorCheck {
            name: name.clone(),
            size: a.len(),
            checked: indices.len(),
            max_relative_error: 0.0,
            worst_index: 0,
            worst_analytic: 0.0,
            worst_numeric: 0.0,
        };
        for k in indices {
            let orig = params.tensors()[ti].data[k];
            params.tensors_mut()[ti].data[k] = orig + cfg.h;
            let plus = loss(&params)?;
            params.tensors_mut()[ti].data[k] = orig - cfg.h;
            let minus = loss(&params)?;
            params.tensors_mut()[ti].data[k] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let e = relative_error(a[k], numeric);
            if e > check.max_relative_error || e.is_nan() {
                check.max_relative_error = if e.is_nan() { f64::INFINITY } else { e };
                check.worst_index = k;
                check.worst_analytic = a[k];
                check.worst_numeric = numeric;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport {
        variant: cfg.model.variant,
        tolerance: cfg.tolerance,
        tensors,
    })
}
