//! Verification oracles, independent of the training pipeline: central
//! finite-difference checks of every training criterion through a small
//! end-to-end model, an analytic mutual-information benchmark on correlated
//! Gaussians, and a brute-force cross-check of the EER threshold sweep.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{finite_difference_check, Tape, Tensor, ValueId};
use crate::error::Result;
use crate::eval::{compute_eer, EerResult, ScoreSet};
use crate::losses::{
    adversarial_loss, am_softmax_loss, dv_bound, identity_change_loss, mi_objective,
    reconstruction_loss, speaker_loss, IcItem,
};
use crate::nets::{
    classify_rows, critic_apply, decode, encode, init_critic_params, Component, ComponentSet,
    Forward, ModelBundle, ModelConfig,
};
use crate::train::Adam;

/// Tolerance for every finite-difference gradient check.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Central-difference step used by the gradient checks.
pub const GRADCHECK_EPS: f64 = 1e-5;
/// Absolute tolerance for the Gaussian mutual-information benchmark, in nats.
pub const MI_TOL_NATS: f64 = 0.10;
/// Extra cap for the independent (rho = 0) benchmark case, in nats.
pub const MI_ZERO_CAP: f64 = 0.05;

/// Outcome of one verification case.
#[derive(Debug, Clone)]
pub struct CaseReport {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of one verification suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: String,
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    /// One `[PASS]`/`[FAIL]` line per case plus a closing tally.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.cases {
            let tag = if c.passed { "[PASS]" } else { "[FAIL]" };
            out.push_str(&format!("{tag} {}: {}\n", c.name, c.detail));
        }
        let ok = self.cases.iter().filter(|c| c.passed).count();
        out.push_str(&format!("{}: {ok}/{} cases passed\n", self.name, self.cases.len()));
        out
    }
}

/// Small but fully wired model: every layer kind of the real configuration
/// is present, at sizes where exhaustive coordinate sweeps stay cheap.
fn verify_config() -> ModelConfig {
    ModelConfig {
        d_emb: 4,
        n_classes: 3,
        bins: 17,
        mel_bins: 8,
        frames: 5,
        enc_channels: vec![2],
        enc_hidden: 5,
        dec_channels: vec![2],
        dec_hidden: 6,
        critic_hidden: 5,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("shape/data sizes agree")
}

/// Replaces the critic's zero-initialized head so the bound is live and
/// gradients reach the encoders through it.
fn randomize_critic_head(b: &mut ModelBundle, rng: &mut ChaCha8Rng) {
    let critic = b.layout().critic.clone();
    for i in [critic.w2, critic.b2] {
        for v in b.params_mut()[i].tensor.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

/// Runs a central-difference check of `build`'s loss against the analytic
/// gradients at every coordinate of every model parameter.
fn gradcheck_case<F>(name: &str, template: ModelBundle, build: F) -> Result<CaseReport>
where
    F: Fn(&mut Forward, &ModelBundle) -> Result<ValueId>,
{
    let inputs: Vec<Tensor> =
        (0..template.n_params()).map(|i| template.param(i).tensor.clone()).collect();
    let rep = finite_difference_check(&inputs, GRADCHECK_EPS, |tape, ids| {
        let mut bundle = template.clone();
        for (k, id) in ids.iter().enumerate() {
            bundle.params_mut()[k].tensor = tape.value(*id).clone();
        }
        let mut f = Forward::new(tape, &bundle, ComponentSet::all());
        build(&mut f, &bundle)
    })?;
    Ok(CaseReport {
        name: name.to_string(),
        passed: rep.passes(GRADCHECK_TOL),
        detail: format!(
            "max rel err {:.3e} over {} coordinates",
            rep.max_rel_err, rep.coords_checked
        ),
    })
}

/// Finite-difference checks for the speaker, adversarial,
/// mutual-information, reconstruction, identity-change, and angular-margin
/// criteria, each differentiated end to end through the model parameters.
pub fn gradcheck_suite() -> Result<SuiteReport> {
    let cfg = verify_config();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let spec = |rng: &mut ChaCha8Rng| rand_tensor(rng, vec![cfg.frames, cfg.bins]);
    let mel = |rng: &mut ChaCha8Rng| rand_tensor(rng, vec![cfg.frames, cfg.mel_bins]);

    let specs: Vec<Tensor> = (0..4).map(|_| spec(&mut rng)).collect();
    let mels: Vec<Tensor> = (0..4).map(|_| mel(&mut rng)).collect();
    let labels = [0usize, 1, 2];

    let mut cases = Vec::new();

    let s = specs.clone();
    cases.push(gradcheck_case("speaker-loss", ModelBundle::new(cfg.clone(), 21)?, move |f, b| {
        let embs: Result<Vec<ValueId>> = s[..3]
            .iter()
            .map(|t| {
                let x = f.tape.leaf(t.clone());
                encode(f, b, Component::EncSpk, x)
            })
            .collect();
        let rows = f.tape.stack_rows(&embs?)?;
        let logits = classify_rows(f, b, rows, false)?;
        speaker_loss(f.tape, logits, &labels)
    })?);

    // The adversarial criterion is checked with a live classifier: its
    // train-time stop-gradient defines those derivatives as zero, which a
    // finite difference of the underlying function cannot confirm.
    let s = specs.clone();
    cases.push(gradcheck_case("adversarial-loss", ModelBundle::new(cfg.clone(), 22)?, move |f, b| {
        let embs: Result<Vec<ValueId>> = s[..3]
            .iter()
            .map(|t| {
                let x = f.tape.leaf(t.clone());
                encode(f, b, Component::EncRes, x)
            })
            .collect();
        let rows = f.tape.stack_rows(&embs?)?;
        let logits = classify_rows(f, b, rows, false)?;
        adversarial_loss(f.tape, logits)
    })?);

    // Dedicated draw for the MI case: its inputs, template, and live critic
    // head are chosen to sit far from every ReLU kink and dead path, where
    // the frozen relative-error formula is meaningful at eps 1e-5.
    let mut mi_rng = ChaCha8Rng::seed_from_u64(63);
    let s: Vec<Tensor> = (0..4).map(|_| spec(&mut mi_rng)).collect();
    let mut mi_template = ModelBundle::new(cfg.clone(), 34)?;
    randomize_critic_head(&mut mi_template, &mut mi_rng);
    cases.push(gradcheck_case("mi-objective", mi_template, move |f, b| {
        let enc = |f: &mut Forward, b: &ModelBundle, which, t: &Tensor| -> Result<ValueId> {
            let x = f.tape.leaf(t.clone());
            encode(f, b, which, x)
        };
        let mut spk_a = Vec::new();
        let mut spk_ap = Vec::new();
        let mut res_a = Vec::new();
        let mut res_ap = Vec::new();
        for item in s.chunks(2) {
            spk_a.push(enc(f, b, Component::EncSpk, &item[0])?);
            spk_ap.push(enc(f, b, Component::EncSpk, &item[1])?);
            res_a.push(enc(f, b, Component::EncRes, &item[0])?);
            res_ap.push(enc(f, b, Component::EncRes, &item[1])?);
        }
        mi_objective(f, b, &spk_a, &spk_ap, &res_a, &res_ap)
    })?);

    let (s, m) = (specs.clone(), mels.clone());
    cases.push(gradcheck_case("reconstruction-loss", ModelBundle::new(cfg.clone(), 24)?, move |f, b| {
        let x = f.tape.leaf(s[0].clone());
        let spk = encode(f, b, Component::EncSpk, x)?;
        let res = encode(f, b, Component::EncRes, x)?;
        let rec = decode(f, b, spk, res)?;
        let target = f.tape.leaf(m[0].clone());
        reconstruction_loss(f.tape, rec, target)
    })?);

    let (s, m) = (specs.clone(), mels.clone());
    cases.push(gradcheck_case("identity-change-loss", ModelBundle::new(cfg.clone(), 25)?, move |f, b| {
        let mut items = Vec::new();
        for (pair_s, pair_m) in s.chunks(2).zip(m.chunks(2)) {
            let xa = f.tape.leaf(pair_s[0].clone());
            let xb = f.tape.leaf(pair_s[1].clone());
            items.push(IcItem {
                spk_a: encode(f, b, Component::EncSpk, xa)?,
                spk_b: encode(f, b, Component::EncSpk, xb)?,
                res_a: encode(f, b, Component::EncRes, xa)?,
                res_b: encode(f, b, Component::EncRes, xb)?,
                mel_a: f.tape.leaf(pair_m[0].clone()),
                mel_b: f.tape.leaf(pair_m[1].clone()),
            });
        }
        identity_change_loss(f, b, &items)
    })?);

    let s = specs.clone();
    cases.push(gradcheck_case("am-softmax-loss", ModelBundle::new(cfg.clone(), 26)?, move |f, b| {
        let embs: Result<Vec<ValueId>> = s[..3]
            .iter()
            .map(|t| {
                let x = f.tape.leaf(t.clone());
                encode(f, b, Component::EncSpk, x)
            })
            .collect();
        let rows = f.tape.stack_rows(&embs?)?;
        am_softmax_loss(f, b, rows, &labels, 0.2, 30.0)
    })?);

    Ok(SuiteReport { name: "gradcheck".to_string(), cases })
}

/// Draws `n` correlated Gaussian pairs and returns (joint, shuffled-marginal)
/// row matrices of shape `[n, 2]`.
fn gaussian_pairs(rng: &mut ChaCha8Rng, rho: f64, n: usize) -> (Tensor, Tensor) {
    let noise_scale = (1.0 - rho * rho).sqrt();
    let xs: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let ys: Vec<f64> = xs
        .iter()
        .map(|&x| rho * x + noise_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let mut joint = Vec::with_capacity(2 * n);
    let mut marg = Vec::with_capacity(2 * n);
    for i in 0..n {
        joint.extend_from_slice(&[xs[i], ys[i]]);
        marg.extend_from_slice(&[xs[i], ys[perm[i]]]);
    }
    (
        Tensor::matrix(n, 2, joint).expect("sizes agree"),
        Tensor::matrix(n, 2, marg).expect("sizes agree"),
    )
}

fn dv_on_batch(
    params: &[crate::nets::Param],
    joint: Tensor,
    marg: Tensor,
) -> Result<(Tape, ValueId)> {
    let mut tape = Tape::new();
    let ids: Vec<ValueId> =
        params.iter().enumerate().map(|(i, p)| tape.param(i, p.tensor.clone())).collect();
    let j = tape.leaf(joint);
    let m = tape.leaf(marg);
    let tj = critic_apply(&mut tape, ids[0], ids[1], ids[2], ids[3], j)?;
    let tm = critic_apply(&mut tape, ids[0], ids[1], ids[2], ids[3], m)?;
    let v = dv_bound(&mut tape, tj, tm)?;
    Ok((tape, v))
}

/// Trains a fresh critic on `rho`-correlated 1-D Gaussians and returns the
/// bound evaluated on held-out samples.
pub fn train_gaussian_critic(rho: f64, seed: u64, steps: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ rho.to_bits());
    let mut params = init_critic_params(1, 64, seed);
    let mut opt = Adam::new(&params);
    let mask = ComponentSet::of(&[Component::Critic]);
    for _ in 0..steps {
        let (joint, marg) = gaussian_pairs(&mut rng, rho, 256);
        let (mut tape, v) = dv_on_batch(&params, joint, marg)?;
        let loss = tape.neg(v)?;
        let grads = tape.backward(loss)?;
        opt.step(&mut params, &grads, mask, 2e-3)?;
    }
    let evals = 4;
    let mut estimate = 0.0;
    for _ in 0..evals {
        let (joint, marg) = gaussian_pairs(&mut rng, rho, 2048);
        let (tape, v) = dv_on_batch(&params, joint, marg)?;
        estimate += tape.value(v).scalar_value()? / evals as f64;
    }
    Ok(estimate)
}

/// Trains the bound's critic on correlated Gaussians and compares the
/// recovered mutual information against the analytic value
/// `-0.5 * ln(1 - rho^2)` for rho in {0, 0.5, 0.9}, three seeds each.
pub fn mi_bench() -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for &rho in &[0.0f64, 0.5, 0.9] {
        let analytic = 0.5 * (1.0 / (1.0 - rho * rho)).ln();
        for seed in 1..=3u64 {
            let estimate = train_gaussian_critic(rho, seed, 400)?;
            let mut passed = (estimate - analytic).abs() <= MI_TOL_NATS;
            if rho == 0.0 {
                passed &= estimate <= MI_ZERO_CAP;
            }
            cases.push(CaseReport {
                name: format!("gaussian-mi rho={rho} seed={seed}"),
                passed,
                detail: format!(
                    "estimate {estimate:.4} nats vs analytic {analytic:.4} (err {:+.4})",
                    estimate - analytic
                ),
            });
        }
    }
    Ok(SuiteReport { name: "mi-bench".to_string(), cases })
}

/// Exhaustive reference EER: recounts both error rates at every candidate
/// threshold instead of sweeping prefix counts.
pub fn brute_force_eer(s: &ScoreSet) -> Result<EerResult> {
    // Reuse compute_eer's input validation, then recount from scratch.
    compute_eer(s)?;
    let mut distinct = s.scores.clone();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = vec![f64::NEG_INFINITY, f64::INFINITY];
    for w in distinct.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    candidates.sort_by(f64::total_cmp);
    let n_tgt = s.targets.iter().filter(|&&t| t).count() as f64;
    let n_non = s.targets.len() as f64 - n_tgt;
    let mut best: Option<EerResult> = None;
    for &t in &candidates {
        let mut fa = 0.0;
        let mut fr = 0.0;
        for (&score, &is_tgt) in s.scores.iter().zip(&s.targets) {
            if is_tgt && score < t {
                fr += 1.0;
            }
            if !is_tgt && score >= t {
                fa += 1.0;
            }
        }
        let far = fa / n_non;
        let frr = fr / n_tgt;
        let gap = (far - frr).abs();
        if best.as_ref().is_none_or(|b| gap < (b.far - b.frr).abs()) {
            best = Some(EerResult { eer: 0.5 * (far + frr), threshold: t, far, frr });
        }
    }
    Ok(best.expect("candidate list is never empty"))
}

fn random_score_set(rng: &mut ChaCha8Rng) -> ScoreSet {
    let mut s = ScoreSet::default();
    let n_tgt = rng.random_range(1..=40);
    let n_non = rng.random_range(1..=40);
    let quantize = rng.random_bool(0.5);
    let draw = |rng: &mut ChaCha8Rng| {
        let v = rng.random_range(-1.0f64..1.0);
        if quantize {
            (v * 10.0).round() / 10.0
        } else {
            v
        }
    };
    for _ in 0..n_tgt {
        s.push(draw(rng), true);
    }
    for _ in 0..n_non {
        s.push(draw(rng), false);
    }
    s
}

/// Cross-checks the production EER sweep against [`brute_force_eer`] on
/// random score sets and confirms invariance under order-preserving score
/// transforms.
pub fn eer_oracle_suite() -> Result<SuiteReport> {
    let mut cases = Vec::new();

    let mut rng = ChaCha8Rng::seed_from_u64(0xEE12);
    let mut mismatch = None;
    let total = 1000;
    for i in 0..total {
        let s = random_score_set(&mut rng);
        let fast = compute_eer(&s)?;
        let slow = brute_force_eer(&s)?;
        let same = fast.eer == slow.eer
            && fast.threshold == slow.threshold
            && fast.far == slow.far
            && fast.frr == slow.frr;
        if !same {
            mismatch = Some(format!(
                "set {i}: sweep eer {:.6}@{:.6} vs oracle {:.6}@{:.6}",
                fast.eer, fast.threshold, slow.eer, slow.threshold
            ));
            break;
        }
    }
    cases.push(CaseReport {
        name: "oracle-equivalence".to_string(),
        passed: mismatch.is_none(),
        detail: mismatch
            .unwrap_or_else(|| format!("{total}/{total} random score sets matched exactly")),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(0xEE34);
    let transforms: [(&str, fn(f64) -> f64); 3] = [
        ("affine 2x+1", |v| 2.0 * v + 1.0),
        ("tanh", f64::tanh),
        ("exp", f64::exp),
    ];
    let mut broken = None;
    let sets = 200;
    'outer: for i in 0..sets {
        let s = random_score_set(&mut rng);
        let base = compute_eer(&s)?;
        for (tname, tf) in transforms {
            let mapped = ScoreSet {
                scores: s.scores.iter().map(|&v| tf(v)).collect(),
                targets: s.targets.clone(),
            };
            let got = compute_eer(&mapped)?;
            if got.eer != base.eer {
                broken = Some(format!(
                    "set {i} under {tname}: eer {:.6} vs base {:.6}",
                    got.eer, base.eer
                ));
                break 'outer;
            }
        }
    }
    cases.push(CaseReport {
        name: "monotone-invariance".to_string(),
        passed: broken.is_none(),
        detail: broken.unwrap_or_else(|| {
            format!("{sets} sets x {} transforms left the EER unchanged", transforms.len())
        }),
    });

    Ok(SuiteReport { name: "eer-oracle".to_string(), cases })
}
