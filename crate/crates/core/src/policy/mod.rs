//! Windowed embedding-sum token policy with exact analytic gradients.
//!
//! ```text
//! logits(ctx) = U · tanh( b + Σ_{j=1..W} P_j · E[ctx[-j]] )
//! ```
//!
//! Contexts shorter than `W` are left-padded with PAD. The parameter vector is
//! laid out as `E (|V|×d) | P_1..P_W (d×d each) | b (d) | U (|V|×d)`, every
//! matrix row-major.

mod checkpoint;
mod warmstart;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use warmstart::{warmstart_mle, warmstart_mle_with, WarmStartReport};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{Lane, Rng, StreamKey};
use crate::trajectory::{Origin, Protocol, Trajectory};
use crate::vocab::{Role, TokenId, Vocabulary};

pub const MAX_PARAMS: usize = 100_000;
pub const INIT_SCALE: f64 = 0.05;

pub fn param_count(vocab_size: usize, window: usize, embed_dim: usize) -> usize {
    2 * vocab_size * embed_dim + window * embed_dim * embed_dim + embed_dim
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: Vocabulary,
    window: usize,
    embed_dim: usize,
    weights: Vec<f64>,
}

/// Activations of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub window: Vec<TokenId>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn init_params(vocab: &Vocabulary, window: usize, embed_dim: usize, seed: u64) -> Result<PolicyParams> {
    let mut params = PolicyParams::zeros(vocab, window, embed_dim)?;
    let mut rng = StreamKey::new(seed, Lane::Init).rng();
    for w in params.weights.iter_mut() {
        *w = rng.gen_range(-INIT_SCALE..=INIT_SCALE);
    }
    Ok(params)
}

impl PolicyParams {
    pub fn zeros(vocab: &Vocabulary, window: usize, embed_dim: usize) -> Result<Self> {
        if vocab.size() == 0 || window == 0 || embed_dim == 0 {
            return Err(Error::InvalidArgument("vocab, window and embed_dim must be non-zero".into()));
        }
        if window < 2 {
            return Err(Error::InvalidArgument(format!("window {window} < 2")));
        }
        if embed_dim < 4 {
            return Err(Error::InvalidArgument(format!("embed_dim {embed_dim} < 4")));
        }
        let n = param_count(vocab.size(), window, embed_dim);
        if n > MAX_PARAMS {
            return Err(Error::InvalidArgument(format!("{n} parameters exceeds {MAX_PARAMS}")));
        }
        Ok(Self { vocab: vocab.clone(), window, embed_dim, weights: vec![0.0; n] })
    }

    pub fn from_weights(vocab: &Vocabulary, window: usize, embed_dim: usize, weights: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(vocab, window, embed_dim)?;
        if weights.len() != p.weights.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} weights, got {}",
                p.weights.len(),
                weights.len()
            )));
        }
        if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFiniteValue(format!("weight {i}")));
        }
        p.weights = weights;
        Ok(p)
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    fn vd(&self) -> usize {
        self.vocab.size() * self.embed_dim
    }

    pub fn embed_offset(&self, token: TokenId) -> usize {
        token as usize * self.embed_dim
    }

    /// Offset of `P_j` (`j` is 1-based, as in `ctx[-j]`).
    pub fn proj_offset(&self, j: usize) -> usize {
        debug_assert!(j >= 1 && j <= self.window);
        self.vd() + (j - 1) * self.embed_dim * self.embed_dim
    }

    pub fn bias_offset(&self) -> usize {
        self.vd() + self.window * self.embed_dim * self.embed_dim
    }

    pub fn out_offset(&self, token: TokenId) -> usize {
        self.bias_offset() + self.embed_dim + token as usize * self.embed_dim
    }

    /// The last `W` tokens, most recent first, PAD-filled.
    pub fn window_of(&self, ctx: &[TokenId]) -> Vec<TokenId> {
        let pad = self.vocab.id(Role::Pad);
        (1..=self.window)
            .map(|j| if ctx.len() >= j { ctx[ctx.len() - j] } else { pad })
            .collect()
    }

    pub fn forward(&self, ctx: &[TokenId]) -> Forward {
        let d = self.embed_dim;
        let window = self.window_of(ctx);
        let w = &self.weights;
        let b = self.bias_offset();
        let mut z: Vec<f64> = w[b..b + d].to_vec();
        for (j0, &tok) in window.iter().enumerate() {
            let e = &w[self.embed_offset(tok)..self.embed_offset(tok) + d];
            let p = &w[self.proj_offset(j0 + 1)..self.proj_offset(j0 + 1) + d * d];
            for (r, zr) in z.iter_mut().enumerate() {
                let row = &p[r * d..(r + 1) * d];
                *zr += row.iter().zip(e).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let hidden: Vec<f64> = z.into_iter().map(f64::tanh).collect();
        let out0 = self.out_offset(0);
        let logits = w[out0..out0 + self.vd()]
            .chunks_exact(d)
            .map(|u| u.iter().zip(&hidden).map(|(a, b)| a * b).sum())
            .collect();
        Forward { window, hidden, logits }
    }

    pub fn logits(&self, ctx: &[TokenId]) -> Vec<f64> {
        self.forward(ctx).logits
    }

    /// Log-probability of `token` after `ctx`, renormalized over the ids not
    /// in `banned`.
    pub fn token_logprob(&self, ctx: &[TokenId], token: TokenId, banned: &[TokenId]) -> f64 {
        let logits = self.logits(ctx);
        log_softmax_masked(&logits, banned)[token as usize]
    }

    /// Adds `coeff · ∇ log π(token | ctx)` (masked by `banned`) into `grad`.
    pub fn accumulate_logprob_grad(
        &self,
        ctx: &[TokenId],
        token: TokenId,
        banned: &[TokenId],
        coeff: f64,
        grad: &mut [f64],
    ) {
        let fwd = self.forward(ctx);
        self.backward(&fwd, token, banned, coeff, grad);
    }

    pub(crate) fn backward(&self, fwd: &Forward, token: TokenId, banned: &[TokenId], coeff: f64, grad: &mut [f64]) {
        let d = self.embed_dim;
        let w = &self.weights;
        let probs: Vec<f64> = log_softmax_masked(&fwd.logits, banned).iter().map(|l| l.exp()).collect();

        let mut dh = vec![0.0; d];
        for (v, p) in probs.iter().enumerate() {
            let g = coeff * (if v == token as usize { 1.0 } else { 0.0 } - p);
            if g == 0.0 {
                continue;
            }
            let off = self.out_offset(v as TokenId);
            for r in 0..d {
                grad[off + r] += g * fwd.hidden[r];
                dh[r] += g * w[off + r];
            }
        }
        let dz: Vec<f64> = dh.iter().zip(&fwd.hidden).map(|(g, h)| g * (1.0 - h * h)).collect();

        let b = self.bias_offset();
        for r in 0..d {
            grad[b + r] += dz[r];
        }
        for (j0, &tok) in fwd.window.iter().enumerate() {
            let po = self.proj_offset(j0 + 1);
            let eo = self.embed_offset(tok);
            for r in 0..d {
                if dz[r] == 0.0 {
                    continue;
                }
                for c in 0..d {
                    grad[po + r * d + c] += dz[r] * w[eo + c];
                    grad[eo + c] += w[po + r * d + c] * dz[r];
                }
            }
        }
    }
}

/// Log-softmax with the `banned` ids set to −∞ before normalization.
pub fn log_softmax_masked(logits: &[f64], banned: &[TokenId]) -> Vec<f64> {
    let allowed = |i: usize| !banned.contains(&(i as TokenId));
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| allowed(i))
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .enumerate()
            .filter(|&(i, _)| allowed(i))
            .map(|(_, &l)| (l - max).exp())
            .sum::<f64>()
            .ln();
    logits
        .iter()
        .enumerate()
        .map(|(i, &l)| if allowed(i) { l - lse } else { f64::NEG_INFINITY })
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax_masked(logits, &[]).into_iter().map(f64::exp).collect()
}

/// Ids that the prohibited protocol masks at every step.
pub fn prohibited_mask(vocab: &Vocabulary) -> [TokenId; 2] {
    [vocab.id(Role::AuxOpen), vocab.id(Role::AuxClose)]
}

/// Banned set under which a protocol's generated tokens are scored.
pub fn scoring_mask(vocab: &Vocabulary, protocol: Protocol) -> Vec<TokenId> {
    match protocol {
        Protocol::Prohibited => prohibited_mask(vocab).to_vec(),
        Protocol::Mandatory | Protocol::Natural => Vec::new(),
    }
}

fn check_banned(vocab: &Vocabulary, banned: &[TokenId]) -> Result<()> {
    let covered = (0..vocab.size() as TokenId).all(|t| banned.contains(&t));
    if covered {
        Err(Error::AllTokensBanned)
    } else {
        Ok(())
    }
}

/// Draws the next token. Returns the token and its log-probability under the
/// temperature-1 policy: unmasked for a forced token, renormalized over the
/// allowed ids otherwise.
pub fn sample_next(
    params: &PolicyParams,
    ctx: &[TokenId],
    banned: &[TokenId],
    forced: Option<TokenId>,
    temperature: f64,
    rng: &mut Rng,
) -> Result<(TokenId, f64)> {
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be > 0")));
    }
    check_banned(params.vocab(), banned)?;
    let logits = params.logits(ctx);
    if let Some(f) = forced {
        return forced_token(&logits, banned, f);
    }
    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let probs: Vec<f64> = log_softmax_masked(&scaled, banned).into_iter().map(f64::exp).collect();
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut chosen = None;
    for (i, &p) in probs.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        acc += p;
        chosen = Some(i);
        if u < acc {
            break;
        }
    }
    let token = chosen.expect("at least one token is allowed") as TokenId;
    Ok((token, log_softmax_masked(&logits, banned)[token as usize]))
}

/// Greedy counterpart of [`sample_next`]; ties go to the lowest id.
pub fn argmax_next(
    params: &PolicyParams,
    ctx: &[TokenId],
    banned: &[TokenId],
    forced: Option<TokenId>,
) -> Result<(TokenId, f64)> {
    check_banned(params.vocab(), banned)?;
    let logits = params.logits(ctx);
    if let Some(f) = forced {
        return forced_token(&logits, banned, f);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, &l) in logits.iter().enumerate() {
        if banned.contains(&(i as TokenId)) {
            continue;
        }
        if best.is_none_or(|(_, b)| l > b) {
            best = Some((i, l));
        }
    }
    let token = best.expect("at least one token is allowed").0 as TokenId;
    Ok((token, log_softmax_masked(&logits, banned)[token as usize]))
}

fn forced_token(logits: &[f64], banned: &[TokenId], forced: TokenId) -> Result<(TokenId, f64)> {
    if banned.contains(&forced) {
        return Err(Error::InvalidArgument(format!("forced token {forced} is banned")));
    }
    if forced as usize >= logits.len() {
        return Err(Error::InvalidArgument(format!("forced token {forced} out of range")));
    }
    Ok((forced, log_softmax_masked(logits, &[])[forced as usize]))
}

/// `r − 1 − log r`; zero at `r = 1` and non-negative everywhere.
pub fn k3(ratio: f64) -> f64 {
    ratio - 1.0 - ratio.ln()
}

/// Per-token KL estimate at the realized `token`, with
/// `r = π_ref(token|ctx) / π_θ(token|ctx)`.
pub fn kl_token(params: &PolicyParams, reference: &PolicyParams, ctx: &[TokenId], token: TokenId) -> f64 {
    let lp = params.token_logprob(ctx, token, &[]);
    let lp_ref = reference.token_logprob(ctx, token, &[]);
    let x = lp_ref - lp;
    x.exp_m1() - x
}

pub(crate) fn validate_trajectory(params: &PolicyParams, prompt: &[TokenId], traj: &Trajectory) -> Result<()> {
    if traj.origin.len() != traj.tokens.len() {
        return Err(Error::ContextMismatch(format!(
            "{} tokens but {} origin flags",
            traj.tokens.len(),
            traj.origin.len()
        )));
    }
    let generated = traj.generated_count();
    if traj.logprobs.len() != generated {
        return Err(Error::ContextMismatch(format!(
            "{generated} generated tokens but {} logprobs",
            traj.logprobs.len()
        )));
    }
    let vocab = params.vocab();
    if let Some(bad) = prompt.iter().chain(&traj.tokens).find(|&&t| !vocab.contains(t)) {
        return Err(Error::ContextMismatch(format!("token id {bad} outside vocabulary")));
    }
    Ok(())
}

/// Full conditioning sequence `prompt ‖ tokens` and the positions (into
/// `tokens`) of every generated token.
fn generated_positions(traj: &Trajectory) -> impl Iterator<Item = usize> + '_ {
    traj.origin
        .iter()
        .enumerate()
        .filter(|(_, &o)| o == Origin::Generated)
        .map(|(i, _)| i)
}

/// One logprob per generated token; injected tokens only condition.
pub fn logprob_of(params: &PolicyParams, prompt: &[TokenId], traj: &Trajectory) -> Result<Vec<f64>> {
    validate_trajectory(params, prompt, traj)?;
    let seq: Vec<TokenId> = prompt.iter().chain(&traj.tokens).copied().collect();
    let mask = scoring_mask(params.vocab(), traj.protocol);
    Ok(generated_positions(traj)
        .map(|i| params.token_logprob(&seq[..prompt.len() + i], traj.tokens[i], &mask))
        .collect())
}

/// Gradient of the summed generated-token log-likelihood.
pub fn grad_logprob(params: &PolicyParams, prompt: &[TokenId], traj: &Trajectory) -> Result<Vec<f64>> {
    validate_trajectory(params, prompt, traj)?;
    let mut grad = vec![0.0; params.len()];
    accumulate_trajectory_grad(params, prompt, traj, |_| 1.0, &mut grad);
    Ok(grad)
}

/// Adds `Σ_t coeff(t) · ∇ log π(o_t)` over generated tokens, `t` counting
/// generated tokens only.
pub(crate) fn accumulate_trajectory_grad(
    params: &PolicyParams,
    prompt: &[TokenId],
    traj: &Trajectory,
    mut coeff: impl FnMut(usize) -> f64,
    grad: &mut [f64],
) {
    let seq: Vec<TokenId> = prompt.iter().chain(&traj.tokens).copied().collect();
    let mask = scoring_mask(params.vocab(), traj.protocol);
    for (t, i) in generated_positions(traj).enumerate() {
        let c = coeff(t);
        if c != 0.0 {
            params.accumulate_logprob_grad(&seq[..prompt.len() + i], traj.tokens[i], &mask, c, grad);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    fn vocab() -> Vocabulary {
        Vocabulary::standard(32).unwrap()
    }

    fn random_params(seed: u64) -> PolicyParams {
        let mut p = init_params(&vocab(), 4, 8, seed).unwrap();
        // larger weights give a non-trivial tanh regime
        for w in p.weights_mut() {
            *w *= 20.0;
        }
        p
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(&vocab(), 4, 8, 7).unwrap();
        let b = init_params(&vocab(), 4, 8, 7).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert!(a.weights().iter().all(|w| w.abs() <= INIT_SCALE));
        assert_ne!(a.weights(), init_params(&vocab(), 4, 8, 8).unwrap().weights());
    }

    #[test]
    fn param_count_matches_enumeration() {
        let v = vocab();
        let p = init_params(&v, 4, 8, 7).unwrap();
        // E: 32×8, P: 4 × 8×8, b: 8, U: 32×8
        let enumerated = 32 * 8 + 4 * 8 * 8 + 8 + 32 * 8;
        assert_eq!(enumerated, 776);
        assert_eq!(p.len(), enumerated);
        assert_eq!(p.out_offset(31) + 8, p.len());
    }

    #[test]
    fn rejects_degenerate_shapes() {
        let v = vocab();
        assert!(init_params(&v, 0, 8, 1).is_err());
        assert!(init_params(&v, 4, 0, 1).is_err());
        assert!(init_params(&v, 1, 8, 1).is_err());
        assert!(init_params(&v, 4, 3, 1).is_err());
        assert!(init_params(&v, 4, 200, 1).is_err());
    }

    #[test]
    fn zero_weights_give_uniform_policy() {
        let p = PolicyParams::zeros(&vocab(), 4, 8).unwrap();
        for ctx in [vec![], vec![9, 10, 11], vec![1; 20]] {
            assert!(p.logits(&ctx).iter().all(|&l| l == 0.0));
            for prob in softmax(&p.logits(&ctx)) {
                assert!((prob - 1.0 / 32.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn only_last_window_tokens_matter() {
        let p = random_params(3);
        let long = [12, 13, 14, 15, 16, 17, 18];
        assert_eq!(p.logits(&long), p.logits(&long[3..]));
        assert_ne!(p.logits(&long), p.logits(&long[4..]));
        // empty context is an all-PAD window
        let pad = vocab().id(Role::Pad);
        assert_eq!(p.logits(&[]), p.logits(&[pad, pad, pad, pad]));
    }

    #[test]
    fn probabilities_normalize() {
        for seed in 0..20 {
            let p = random_params(seed);
            let ctx: Vec<TokenId> = (0..seed as u32 % 7).map(|i| (i * 5 + 3) % 32).collect();
            let total: f64 = softmax(&p.logits(&ctx)).iter().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn logit_derivative_matches_finite_difference() {
        let p = random_params(5);
        let ctx = [12, 20, 3, 9];
        let target = 17;
        // analytic d logit[target] / d w via the logprob gradient identity:
        // ∇ logit_y = ∇ log π(y) + Σ_v π(v) ∇ logit_v; easier to difference directly.
        let h = 1e-5;
        for &idx in &[p.out_offset(target) + 2, p.proj_offset(2) + 9, p.embed_offset(3) + 1, p.bias_offset()] {
            let mut plus = p.clone();
            plus.weights_mut()[idx] += h;
            let mut minus = p.clone();
            minus.weights_mut()[idx] -= h;
            let fd = (plus.logits(&ctx)[target as usize] - minus.logits(&ctx)[target as usize]) / (2.0 * h);
            let analytic = logit_partial(&p, &ctx, target, idx);
            assert!((fd - analytic).abs() < 1e-8, "{idx}: fd {fd} vs {analytic}");
        }
    }

    // d logit[y]/dw computed by hand from the forward definition
    fn logit_partial(p: &PolicyParams, ctx: &[TokenId], y: TokenId, idx: usize) -> f64 {
        let d = p.embed_dim();
        let f = p.forward(ctx);
        let w = p.weights();
        let uo = p.out_offset(y);
        if idx >= uo && idx < uo + d {
            return f.hidden[idx - uo];
        }
        let dz = |r: usize| w[uo + r] * (1.0 - f.hidden[r] * f.hidden[r]);
        if idx >= p.bias_offset() && idx < p.bias_offset() + d {
            return dz(idx - p.bias_offset());
        }
        let mut total = 0.0;
        for (j0, &tok) in f.window.iter().enumerate() {
            let po = p.proj_offset(j0 + 1);
            if idx >= po && idx < po + d * d {
                let (r, c) = ((idx - po) / d, (idx - po) % d);
                total += dz(r) * w[p.embed_offset(tok) + c];
            }
            let eo = p.embed_offset(tok);
            if idx >= eo && idx < eo + d {
                let c = idx - eo;
                total += (0..d).map(|r| dz(r) * w[po + r * d + c]).sum::<f64>();
            }
        }
        total
    }

    #[test]
    fn single_survivor_is_always_sampled() {
        let p = random_params(1);
        let v = vocab();
        let eos = v.id(Role::Eos);
        let banned: Vec<TokenId> = (0..32).filter(|&t| t != eos).collect();
        let mut rng = StreamKey::new(1, Lane::Custom(0)).rng();
        for _ in 0..200 {
            let (t, lp) = sample_next(&p, &[12, 13], &banned, None, 1.0, &mut rng).unwrap();
            assert_eq!(t, eos);
            assert!(lp.abs() < 1e-12);
        }
        let all: Vec<TokenId> = (0..32).collect();
        assert!(matches!(
            sample_next(&p, &[], &all, None, 1.0, &mut rng),
            Err(Error::AllTokensBanned)
        ));
        assert!(sample_next(&p, &[], &[], None, 0.0, &mut rng).is_err());
    }

    #[test]
    fn sampling_frequencies_match_softmax() {
        let p = random_params(11);
        let ctx = [14, 15, 16];
        let banned = [3, 4];
        let probs: Vec<f64> = log_softmax_masked(&p.logits(&ctx), &banned).iter().map(|l| l.exp()).collect();
        let n = 100_000;
        let mut counts = vec![0usize; 32];
        let mut rng = StreamKey::new(2, Lane::Custom(1)).rng();
        for _ in 0..n {
            let (t, _) = sample_next(&p, &ctx, &banned, None, 1.0, &mut rng).unwrap();
            counts[t as usize] += 1;
        }
        assert_eq!(counts[3] + counts[4], 0);
        for (c, &q) in counts.iter().zip(&probs) {
            let sigma = (n as f64 * q * (1.0 - q)).sqrt();
            assert!(
                (*c as f64 - n as f64 * q).abs() <= 3.0 * sigma.max(1.0),
                "count {c} vs expected {}",
                n as f64 * q
            );
        }
    }

    #[test]
    fn forced_token_uses_unmasked_logprob() {
        let p = random_params(4);
        let ctx = [20, 21];
        let mut rng = StreamKey::new(3, Lane::Custom(2)).rng();
        let (t, lp) = sample_next(&p, &ctx, &[5], Some(2), 1.0, &mut rng).unwrap();
        assert_eq!(t, 2);
        assert_eq!(lp, p.token_logprob(&ctx, 2, &[]));
        assert!(sample_next(&p, &ctx, &[2], Some(2), 1.0, &mut rng).is_err());
    }

    #[test]
    fn k3_values() {
        // 0.5 − 1 − ln 0.5 and 2 − 1 − ln 2
        assert!((k3(0.5) - (0.5 - 1.0 + std::f64::consts::LN_2)).abs() < 1e-15);
        assert!((k3(0.5) - 0.193_147_180_559_945_3).abs() < 1e-15);
        assert_eq!(k3(1.0), 0.0);
        assert!((k3(2.0) - 0.306_852_819_440_054_7).abs() < 1e-15);
        for r in [1e-6, 0.1, 0.9, 1.1, 10.0, 1e6] {
            assert!(k3(r) >= 0.0);
        }
    }

    #[test]
    fn kl_of_identical_policies_is_zero() {
        let p = random_params(9);
        for ctx in [vec![], vec![12, 13, 14]] {
            for tok in 0..32 {
                assert_eq!(kl_token(&p, &p, &ctx, tok), 0.0);
            }
        }
    }

    #[test]
    fn k3_expectation_approaches_exact_kl_on_four_outcomes() {
        // π_θ and π_ref over four outcomes; E_{o~π_θ}[k3(π_ref/π_θ)] = KL(π_θ‖π_ref)
        let pt: [f64; 4] = [0.1, 0.2, 0.3, 0.4];
        let pr: [f64; 4] = [0.4, 0.3, 0.2, 0.1];
        let exact: f64 = pt.iter().zip(&pr).map(|(a, b)| a * (a / b).ln()).sum();
        let mut rng = StreamKey::new(5, Lane::Custom(3)).rng();
        let n = 1_000_000;
        let mut total = 0.0;
        for _ in 0..n {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut k = 3;
            for (i, p) in pt.iter().enumerate() {
                acc += p;
                if u < acc {
                    k = i;
                    break;
                }
            }
            total += k3(pr[k] / pt[k]);
        }
        assert!((total / n as f64 - exact).abs() < 1e-2);
    }

    #[test]
    fn kl_token_expectation_matches_full_vocab_kl() {
        let p = random_params(21);
        let r = random_params(22);
        let ctx = [12, 13];
        let lp = log_softmax_masked(&p.logits(&ctx), &[]);
        let lr = log_softmax_masked(&r.logits(&ctx), &[]);
        let exact: f64 = lp.iter().zip(&lr).map(|(a, b)| a.exp() * (a - b)).sum();
        let estimate: f64 = (0..32).map(|t| lp[t].exp() * kl_token(&p, &r, &ctx, t as TokenId)).sum();
        assert!((exact - estimate).abs() < 1e-12);
    }

    fn toy_trajectory() -> Trajectory {
        let mut t = Trajectory::new(Protocol::Natural);
        t.push_generated(12, 0.0);
        t.push_generated(13, 0.0);
        t.push_injected(&[2, 20]);
        t.push_generated(5, 0.0);
        t
    }

    #[test]
    fn logprob_entries_cover_generated_tokens_only() {
        let z = PolicyParams::zeros(&vocab(), 4, 8).unwrap();
        let mut one = Trajectory::new(Protocol::Natural);
        one.push_generated(12, 0.0);
        let lp = logprob_of(&z, &[9], &one).unwrap();
        assert_eq!(lp.len(), 1);
        assert!((lp[0] + 32f64.ln()).abs() < 1e-12);

        let p = random_params(2);
        let t = toy_trajectory();
        assert_eq!(logprob_of(&p, &[9, 10], &t).unwrap().len(), 3);

        let mut broken = t.clone();
        broken.origin.pop();
        assert!(logprob_of(&p, &[9], &broken).is_err());
        let mut broken = t;
        broken.tokens[0] = 99;
        assert!(logprob_of(&p, &[9], &broken).is_err());
    }

    #[test]
    fn uniform_single_token_gradient_is_onehot_minus_uniform_through_output_map() {
        // With zero weights the hidden state is zero, so only the bias path and
        // U carry gradient: dU = (onehot − 1/|V|) ⊗ h = 0, db = Uᵀ(...)·1 = 0.
        let z = PolicyParams::zeros(&vocab(), 4, 8).unwrap();
        let mut t = Trajectory::new(Protocol::Natural);
        t.push_generated(12, 0.0);
        assert!(grad_logprob(&z, &[9], &t).unwrap().iter().all(|&g| g == 0.0));

        // Give h a non-zero value through the bias: then dU[v] = (1[v=y] − 1/|V|)·h.
        let mut p = z.clone();
        let b = p.bias_offset();
        p.weights_mut()[b] = 0.5;
        let g = grad_logprob(&p, &[9], &t).unwrap();
        let h0 = 0.5f64.tanh();
        for v in 0..32u32 {
            let expected = (if v == 12 { 1.0 } else { 0.0 } - 1.0 / 32.0) * h0;
            assert!((g[p.out_offset(v)] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_trajectory_has_zero_gradient() {
        let p = random_params(8);
        let mut t = Trajectory::new(Protocol::Natural);
        t.push_injected(&[2, 20, 3]);
        assert!(grad_logprob(&p, &[9], &t).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn logprob_gradient_matches_central_differences() {
        let p = random_params(13);
        let prompt = [9, 10, 11];
        let t = toy_trajectory();
        let g = grad_logprob(&p, &prompt, &t).unwrap();
        let f = |q: &PolicyParams| logprob_of(q, &prompt, &t).unwrap().iter().sum::<f64>();
        let h = 1e-5;
        let mut rng = StreamKey::new(6, Lane::Custom(4)).rng();
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let idx = rng.gen_range(0..p.len());
            let mut plus = p.clone();
            plus.weights_mut()[idx] += h;
            let mut minus = p.clone();
            minus.weights_mut()[idx] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-5);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }
}
