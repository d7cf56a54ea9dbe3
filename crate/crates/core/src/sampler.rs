//! Parallel split/merge MCMC for Dirichlet-process mixtures.
//!
//! Each iteration makes one split-or-merge Metropolis-Hastings proposal and
//! then one instantiated-weight Gibbs sweep. The sweep samples the weights,
//! then every component's parameters (in parallel over components), then
//! every assignment (in parallel over observations).
//!
//! All randomness comes from counter-based streams keyed by
//! `(seed, iteration, slot, tag, index)`, so results do not depend on the
//! number of worker threads.
//!
//! The sampler targets the Chinese-restaurant-process partition posterior
//! `p(z | X) ∝ alpha^K prod_k Gamma(N_k) m(X_k)`, where `m` is the group
//! marginal likelihood supplied by the [`ComponentModel`].

use rand::Rng;
use rayon::prelude::*;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::rng::{self, tag, StreamRng};
use crate::stats::{log_sum_exp, sample_dirichlet, sample_log_categorical};

/// Likelihood model plugged into the sampler. Observations are addressed by
/// index `0..len()`.
pub trait ComponentModel: Sync {
    type Component: Clone + Send + Sync;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// DP concentration.
    fn alpha(&self) -> f64;

    /// Log density of observation `i` under `comp`.
    fn loglik(&self, comp: &Self::Component, i: usize) -> f64;

    /// Draw parameters from the posterior given `members`. When `members`
    /// is empty the draw comes from the prior; `context` (never empty) then
    /// supplies any data-dependent quantity the prior leaves open.
    fn sample_component(
        &self,
        members: &[usize],
        context: &[usize],
        rng: &mut StreamRng,
    ) -> Result<Self::Component>;

    /// Draw parameters for a fresh component from the prior.
    fn sample_prior(&self, rng: &mut StreamRng) -> Result<Self::Component>;

    /// Log marginal likelihood of a group; zero for an empty group.
    fn log_marginal(&self, members: &[usize]) -> Result<f64>;

    /// Log posterior-predictive density of observation `i` given `members`.
    fn log_predictive(&self, i: usize, members: &[usize]) -> Result<f64>;

    /// Coordinates used to measure distances between groups when choosing
    /// merge candidates.
    fn position(&self, i: usize) -> &[f64];

    /// Hook to mirror bookkeeping into the component.
    fn set_occupancy(&self, _comp: &mut Self::Component, _count: usize, _weight: f64) {}
}

/// Which state [`run`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Selection {
    /// State after the last iteration.
    #[default]
    Final,
    /// Visited state with the highest unnormalized log posterior.
    MaxPosterior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub iterations: usize,
    pub launch_scans: usize,
    /// Split-or-merge attempts per iteration.
    pub proposal_rate: usize,
    pub seed: u64,
    pub selection: Selection,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            launch_scans: 5,
            proposal_rate: 1,
            seed: 0,
            selection: Selection::Final,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.launch_scans == 0 {
            return Err(Error::usage("iterations and launch scans must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalKind {
    Split,
    Merge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalOutcome {
    pub kind: ProposalKind,
    pub accepted: bool,
    /// `min(0, log acceptance ratio)`.
    pub log_acceptance: f64,
    /// Labels in the state the proposal started from.
    pub targets: Vec<usize>,
}

/// Partition plus instantiated component parameters.
///
/// The first `frozen` observations keep their labels forever (incremental
/// mode); `frozen` is zero for ordinary runs.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureState<C> {
    assignments: Vec<usize>,
    components: Vec<C>,
    counts: Vec<usize>,
    weights: Vec<f64>,
    pub iteration: u64,
    pub seed: u64,
    frozen: usize,
}

impl<C: Clone> MixtureState<C> {
    /// Build a state from labels and parameters; counts and weights are
    /// derived from the labels.
    pub fn new(assignments: Vec<usize>, components: Vec<C>, seed: u64, iteration: u64) -> Result<Self> {
        let mut counts = vec![0usize; components.len()];
        for &z in &assignments {
            *counts
                .get_mut(z)
                .ok_or_else(|| Error::usage(format!("label {z} has no component")))? += 1;
        }
        if counts.contains(&0) {
            return Err(Error::usage("every component needs at least one member"));
        }
        let n = assignments.len() as f64;
        let weights = counts.iter().map(|&c| c as f64 / n).collect();
        Ok(Self {
            assignments,
            components,
            counts,
            weights,
            iteration,
            seed,
            frozen: 0,
        })
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn components(&self) -> &[C] {
        &self.components
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn len(&self) -> usize {
        self.assignments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }

    pub fn frozen(&self) -> usize {
        self.frozen
    }

    pub fn into_components(self) -> Vec<C> {
        self.components
    }

    /// Member indices of every component, ascending.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self.counts.iter().map(|&c| Vec::with_capacity(c)).collect();
        for (i, &z) in self.assignments.iter().enumerate() {
            out[z].push(i);
        }
        out
    }

    /// Check labels, counts and weights against each other.
    pub fn check(&self) -> Result<()> {
        let k = self.components.len();
        if self.counts.len() != k || self.weights.len() != k {
            return Err(Error::usage("counts and weights must match the component list"));
        }
        let mut counts = vec![0usize; k];
        for &z in &self.assignments {
            if z >= k {
                return Err(Error::usage(format!("label {z} has no component")));
            }
            counts[z] += 1;
        }
        if counts != self.counts || counts.contains(&0) {
            return Err(Error::usage("component counts disagree with the assignments"));
        }
        if (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::usage("weights do not sum to one"));
        }
        Ok(())
    }

    /// True if every member of component `k` is unfrozen.
    fn all_free(&self, members: &[usize]) -> bool {
        members.first().is_some_and(|&i| i >= self.frozen)
    }
}

/// Recompute counts and weights, drop empty components and relabel in order.
fn finalize<M: ComponentModel>(model: &M, state: &mut MixtureState<M::Component>) {
    let k = state.components.len();
    let mut counts = vec![0usize; k];
    for &z in &state.assignments {
        counts[z] += 1;
    }
    let mut relabel = vec![usize::MAX; k];
    let mut next = 0;
    for (old, &c) in counts.iter().enumerate() {
        if c > 0 {
            relabel[old] = next;
            next += 1;
        }
    }
    if next != k {
        let mut kept = Vec::with_capacity(next);
        for (old, comp) in std::mem::take(&mut state.components).into_iter().enumerate() {
            if counts[old] > 0 {
                kept.push(comp);
            }
        }
        state.components = kept;
        for z in &mut state.assignments {
            *z = relabel[*z];
        }
        counts.retain(|&c| c > 0);
    }
    let n = state.assignments.len() as f64;
    state.weights = counts.iter().map(|&c| c as f64 / n).collect();
    state.counts = counts;
    for ((comp, &c), &w) in state.components.iter_mut().zip(&state.counts).zip(&state.weights) {
        model.set_occupancy(comp, c, w);
    }
}

/// Unnormalized log posterior of the partition:
/// `K ln alpha + sum_k [ln Gamma(N_k) + ln m(X_k)]`.
pub fn log_partition_posterior<M: ComponentModel>(model: &M, assignments: &[usize]) -> Result<f64> {
    let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let mut members = vec![Vec::new(); k];
    for (i, &z) in assignments.iter().enumerate() {
        members[z].push(i);
    }
    let mut total = 0.0;
    for m in members.iter().filter(|m| !m.is_empty()) {
        total += model.alpha().ln() + ln_gamma(m.len() as f64) + model.log_marginal(m)?;
    }
    Ok(total)
}

const GIBBS_SLOT: u64 = u64::MAX;

fn key_stream(seed: u64, iteration: u64, slot: u64, tag: u64, extra: &[u64]) -> StreamRng {
    let mut key = vec![iteration, slot, tag];
    key.extend_from_slice(extra);
    rng::stream(seed, &key)
}

/// Stick mass left unrepresented when instantiating fresh components.
const STICK_TOL: f64 = 1e-10;
const MAX_FRESH: usize = 64;

/// Log weights of the occupied components followed by the stick-breaking
/// weights of fresh components: `(pi_1, ..., pi_K, rest) ~ Dir(N_1, ...,
/// N_K, alpha)` and `rest` is broken with `Beta(1, alpha)` sticks.
fn sample_log_weights(counts: &[f64], alpha: f64, rng: &mut StreamRng) -> Result<Vec<f64>> {
    let mut conc = counts.to_vec();
    conc.push(alpha);
    let mut pi = sample_dirichlet(&conc, rng)?;
    let mut rest = pi.pop().unwrap_or(0.0);
    while rest > STICK_TOL && pi.len() < counts.len() + MAX_FRESH {
        let v = 1.0 - rng.random::<f64>().powf(1.0 / alpha);
        pi.push(rest * v);
        rest *= 1.0 - v;
    }
    Ok(pi.iter().map(|p| p.ln()).collect())
}

fn draw_label(logp: &[f64], current: usize, u: f64) -> usize {
    if logp.iter().all(|x| !x.is_finite()) {
        return current;
    }
    sample_log_categorical(logp, u)
}

/// One instantiated-weight Gibbs sweep.
///
/// Weights and parameters are drawn given the partition, including a
/// truncated stick-breaking tail of fresh components from the prior, then
/// every free label is drawn given them. Unused components are dropped.
///
/// Streams are keyed by `state.iteration`; callers advance the counter.
/// Frozen observations keep their labels.
pub fn gibbs_sweep<M: ComponentModel>(
    model: &M,
    state: &MixtureState<M::Component>,
) -> Result<MixtureState<M::Component>> {
    check_model(model, state)?;
    let (seed, it) = (state.seed, state.iteration);
    let members = state.members();
    let counts: Vec<f64> = state.counts.iter().map(|&c| c as f64).collect();
    let log_pi = sample_log_weights(
        &counts,
        model.alpha(),
        &mut key_stream(seed, it, GIBBS_SLOT, tag::WEIGHTS, &[]),
    )?;
    let occupied = members.len();
    let components: Vec<M::Component> = (0..log_pi.len())
        .into_par_iter()
        .map(|k| {
            let mut rng = key_stream(seed, it, GIBBS_SLOT, tag::PARAMS, &[k as u64]);
            match members.get(k) {
                Some(m) => model.sample_component(m, m, &mut rng),
                None => model.sample_prior(&mut rng),
            }
        })
        .collect::<Result<_>>()?;
    debug_assert!(components.len() >= occupied);
    let k = components.len();
    let frozen = state.frozen;
    let mut assignments = state.assignments.clone();
    if k > 1 {
        let free: Vec<usize> = (frozen..model.len())
            .into_par_iter()
            .map_init(
                || vec![0.0; k],
                |lp, i| {
                    for (j, comp) in components.iter().enumerate() {
                        lp[j] = log_pi[j] + model.loglik(comp, i);
                    }
                    let u: f64 = key_stream(seed, it, GIBBS_SLOT, tag::ASSIGN, &[i as u64]).random();
                    draw_label(lp, state.assignments[i], u)
                },
            )
            .collect();
        assignments[frozen..].copy_from_slice(&free);
    }
    let mut next = MixtureState {
        assignments,
        components,
        counts: Vec::new(),
        weights: Vec::new(),
        iteration: it,
        seed,
        frozen,
    };
    finalize(model, &mut next);
    Ok(next)
}

fn check_model<M: ComponentModel>(model: &M, state: &MixtureState<M::Component>) -> Result<()> {
    if state.len() != model.len() {
        return Err(Error::usage(format!(
            "state covers {} observations but the model has {}",
            state.len(),
            model.len()
        )));
    }
    Ok(())
}

/// Auxiliary state of a split or merge move, built from the union `s` only.
struct Launch<C> {
    comps: [C; 2],
    log_pi: [f64; 2],
}

struct Restricted<'a, M: ComponentModel> {
    model: &'a M,
    seed: u64,
    it: u64,
    slot: u64,
    s: &'a [usize],
}

impl<M: ComponentModel> Restricted<'_, M> {
    fn groups(&self, labels: &[u8]) -> [Vec<usize>; 2] {
        let mut g = [Vec::new(), Vec::new()];
        for (&i, &l) in self.s.iter().zip(labels) {
            g[l as usize].push(i);
        }
        g
    }

    /// Parameters and weights for one scan given the current labels.
    fn params(&self, labels: &[u8], scan: u64) -> Result<([M::Component; 2], [f64; 2])> {
        let g = self.groups(labels);
        let half = self.model.alpha() / 2.0;
        let mut wrng = key_stream(self.seed, self.it, self.slot, tag::SCAN_PARAMS, &[scan, 2]);
        let pi = sample_dirichlet(&[g[0].len() as f64 + half, g[1].len() as f64 + half], &mut wrng)?;
        let draw = |j: usize| {
            let mut rng = key_stream(self.seed, self.it, self.slot, tag::SCAN_PARAMS, &[scan, j as u64]);
            self.model.sample_component(&g[j], self.s, &mut rng)
        };
        let (a, b) = rayon::join(|| draw(0), || draw(1));
        Ok(([a?, b?], [pi[0].ln(), pi[1].ln()]))
    }

    fn log_probs(&self, comps: &[M::Component; 2], log_pi: &[f64; 2], i: usize) -> [f64; 2] {
        let a = log_pi[0] + self.model.loglik(&comps[0], i);
        let b = log_pi[1] + self.model.loglik(&comps[1], i);
        let z = log_sum_exp(&[a, b]);
        if z.is_finite() {
            [a - z, b - z]
        } else {
            [-std::f64::consts::LN_2, -std::f64::consts::LN_2]
        }
    }

    fn scan(&self, labels: &[u8], scan: u64) -> Result<Vec<u8>> {
        let (comps, log_pi) = self.params(labels, scan)?;
        Ok(self
            .s
            .par_iter()
            .map(|&i| {
                let lp = self.log_probs(&comps, &log_pi, i);
                let u: f64 = key_stream(self.seed, self.it, self.slot, tag::SCAN_ASSIGN, &[scan, i as u64]).random();
                u8::from(u >= lp[0].exp())
            })
            .collect())
    }

    /// Random binary labels followed by `scans` restricted Gibbs scans, then
    /// the parameters the final scan will use.
    fn launch(&self, scans: usize) -> Result<Launch<M::Component>> {
        let mut lrng = key_stream(self.seed, self.it, self.slot, tag::LAUNCH, &[]);
        let mut labels: Vec<u8> = self.s.iter().map(|_| u8::from(lrng.random::<bool>())).collect();
        for t in 0..scans {
            labels = self.scan(&labels, t as u64)?;
        }
        let (comps, log_pi) = self.params(&labels, scans as u64)?;
        Ok(Launch {
            comps,
            log_pi,
        })
    }

    /// Final scan from the launch state. With `target` the labels are not
    /// sampled; the scan instead scores reaching `target`. Returns the labels
    /// and the log probability of the resulting two-block partition (both
    /// label orders).
    fn final_scan(&self, launch: &Launch<M::Component>, scans: usize, target: Option<&[u8]>) -> (Vec<u8>, f64) {
        let scan = scans as u64 + 1;
        let per: Vec<(u8, f64, f64)> = self
            .s
            .par_iter()
            .enumerate()
            .map(|(j, &i)| {
                let lp = self.log_probs(&launch.comps, &launch.log_pi, i);
                let l = match target {
                    Some(t) => t[j],
                    None => {
                        let u: f64 = key_stream(self.seed, self.it, self.slot, tag::SCAN_ASSIGN, &[scan, i as u64]).random();
                        u8::from(u >= lp[0].exp())
                    }
                };
                (l, lp[l as usize], lp[1 - l as usize])
            })
            .collect();
        let labels = per.iter().map(|p| p.0).collect();
        let direct: f64 = per.iter().map(|p| p.1).sum();
        let swapped: f64 = per.iter().map(|p| p.2).sum();
        (labels, log_sum_exp(&[direct, swapped]))
    }
}

fn mean_of<M: ComponentModel>(model: &M, members: &[usize]) -> Vec<f64> {
    let d = model.position(members[0]).len();
    let mut acc = vec![0.0; d];
    for &i in members {
        for (a, x) in acc.iter_mut().zip(model.position(i)) {
            *a += x;
        }
    }
    acc.iter_mut().for_each(|a| *a /= members.len() as f64);
    acc
}

/// Log probability of choosing each candidate merge pair: proportional to
/// the inverse squared distance between the groups' mean positions.
fn pair_log_probs(means: &[Vec<f64>], eligible: &[usize]) -> Vec<((usize, usize), f64)> {
    let mut pairs = Vec::new();
    for (x, &a) in eligible.iter().enumerate() {
        for &b in &eligible[x + 1..] {
            let d2: f64 = means[a].iter().zip(&means[b]).map(|(p, q)| (p - q) * (p - q)).sum();
            pairs.push(((a, b), -(d2 + 1e-300).ln()));
        }
    }
    let logs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let z = log_sum_exp(&logs);
    pairs.iter_mut().for_each(|p| p.1 -= z);
    pairs
}

/// `ln alpha + ln Gamma(N1) + ln Gamma(N2) - ln Gamma(N1 + N2)
///  + ln m(X1) + ln m(X2) - ln m(X12)`.
fn log_split_target<M: ComponentModel>(model: &M, g1: &[usize], g2: &[usize], union: &[usize]) -> Result<f64> {
    let (n1, n2) = (g1.len() as f64, g2.len() as f64);
    let (m1, m2, m12) = (
        model.log_marginal(g1)?,
        model.log_marginal(g2)?,
        model.log_marginal(union)?,
    );
    Ok(model.alpha().ln() + ln_gamma(n1) + ln_gamma(n2) - ln_gamma(n1 + n2) + m1 + m2 - m12)
}

fn split_eligible<C: Clone>(state: &MixtureState<C>, members: &[Vec<usize>]) -> Vec<usize> {
    (0..members.len())
        .filter(|&k| members[k].len() >= 2 && state.all_free(&members[k]))
        .collect()
}

fn merge_eligible<C: Clone>(state: &MixtureState<C>, members: &[Vec<usize>]) -> Vec<usize> {
    (0..members.len()).filter(|&k| state.all_free(&members[k])).collect()
}

/// Split proposal. `slot` separates several proposals in one iteration.
///
/// Picks a component with at least two (unfrozen) members uniformly,
/// builds a launch state from it, and proposes the final-scan partition.
/// Errors if no component is eligible.
pub fn propose_split<M: ComponentModel>(
    model: &M,
    state: &MixtureState<M::Component>,
    config: &SamplerConfig,
    slot: u64,
) -> Result<(MixtureState<M::Component>, ProposalOutcome)> {
    check_model(model, state)?;
    let members = state.members();
    let eligible = split_eligible(state, &members);
    if eligible.is_empty() {
        return Err(Error::usage("no component has two or more movable members"));
    }
    let mut prng = key_stream(state.seed, state.iteration, slot, tag::PROPOSAL, &[1]);
    let c = eligible[prng.random_range(0..eligible.len())];
    let s = &members[c];
    let r = Restricted {
        model,
        seed: state.seed,
        it: state.iteration,
        slot,
        s,
    };
    let launch = r.launch(config.launch_scans)?;
    let (labels, log_q) = r.final_scan(&launch, config.launch_scans, None);
    let g = r.groups(&labels);
    let mut outcome = ProposalOutcome {
        kind: ProposalKind::Split,
        accepted: false,
        log_acceptance: f64::NEG_INFINITY,
        targets: vec![c],
    };
    if g[0].is_empty() || g[1].is_empty() {
        return Ok((state.clone(), outcome));
    }
    let target = log_split_target(model, &g[0], &g[1], s)?;

    // Reverse move: choosing the pair (c, new) among the split state's
    // merge candidates.
    let mut means: Vec<Vec<f64>> = members.iter().map(|m| mean_of(model, m)).collect();
    means[c] = mean_of(model, &g[0]);
    means.push(mean_of(model, &g[1]));
    let new = means.len() - 1;
    let mut cand = merge_eligible(state, &members);
    cand.push(new);
    let log_pair = pair_log_probs(&means, &cand)
        .into_iter()
        .find(|p| p.0 == (c, new))
        .map(|p| p.1)
        .expect("pair present");

    let log_ratio = target + log_pair + (eligible.len() as f64).ln() - log_q;
    outcome.log_acceptance = log_ratio.min(0.0);
    let u: f64 = prng.random();
    if u.ln() < log_ratio {
        outcome.accepted = true;
        let mut next = state.clone();
        next.components[c] = launch.comps[0].clone();
        next.components.push(launch.comps[1].clone());
        for &i in &g[1] {
            next.assignments[i] = new;
        }
        finalize(model, &mut next);
        return Ok((next, outcome));
    }
    Ok((state.clone(), outcome))
}

/// Merge proposal. The pair is drawn with probability proportional to the
/// inverse squared distance between the components' member means. Errors if
/// fewer than two components are eligible.
pub fn propose_merge<M: ComponentModel>(
    model: &M,
    state: &MixtureState<M::Component>,
    config: &SamplerConfig,
    slot: u64,
) -> Result<(MixtureState<M::Component>, ProposalOutcome)> {
    check_model(model, state)?;
    let members = state.members();
    let cand = merge_eligible(state, &members);
    if cand.len() < 2 {
        return Err(Error::usage("merging needs two components with movable members"));
    }
    let mut prng = key_stream(state.seed, state.iteration, slot, tag::PROPOSAL, &[2]);
    let means: Vec<Vec<f64>> = members.iter().map(|m| mean_of(model, m)).collect();
    let pairs = pair_log_probs(&means, &cand);
    let logs: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let ((a, b), log_pair) = pairs[sample_log_categorical(&logs, prng.random())];

    let mut s: Vec<usize> = members[a].iter().chain(&members[b]).copied().collect();
    s.sort_unstable();
    let current: Vec<u8> = s.iter().map(|&i| u8::from(state.assignments[i] == b)).collect();
    let r = Restricted {
        model,
        seed: state.seed,
        it: state.iteration,
        slot,
        s: &s,
    };
    let launch = r.launch(config.launch_scans)?;
    let (_, log_q) = r.final_scan(&launch, config.launch_scans, Some(&current));

    let target = -log_split_target(model, &members[a], &members[b], &s)?;
    let eligible_before = split_eligible(state, &members);
    let merged_eligible = eligible_before.len() + 1
        - usize::from(eligible_before.contains(&a))
        - usize::from(eligible_before.contains(&b));
    let log_ratio = target - (merged_eligible as f64).ln() + log_q - log_pair;

    let mut outcome = ProposalOutcome {
        kind: ProposalKind::Merge,
        accepted: false,
        log_acceptance: log_ratio.min(0.0),
        targets: vec![a, b],
    };
    let u: f64 = prng.random();
    if u.ln() < log_ratio {
        outcome.accepted = true;
        let mut next = state.clone();
        let mut rng = key_stream(state.seed, state.iteration, slot, tag::PARAMS, &[]);
        next.components[a] = model.sample_component(&s, &s, &mut rng)?;
        for &i in &members[b] {
            next.assignments[i] = a;
        }
        finalize(model, &mut next);
        return Ok((next, outcome));
    }
    Ok((state.clone(), outcome))
}

/// One iteration: `proposal_rate` split-or-merge proposals, then a sweep.
fn step<M: ComponentModel>(
    model: &M,
    mut state: MixtureState<M::Component>,
    config: &SamplerConfig,
) -> Result<MixtureState<M::Component>> {
    for slot in 0..config.proposal_rate as u64 {
        let split = key_stream(state.seed, state.iteration, slot, tag::PROPOSAL, &[0]).random::<bool>();
        let members = state.members();
        let possible = if split {
            !split_eligible(&state, &members).is_empty()
        } else {
            merge_eligible(&state, &members).len() >= 2
        };
        if !possible {
            continue;
        }
        state = if split {
            propose_split(model, &state, config, slot)?.0
        } else {
            propose_merge(model, &state, config, slot)?.0
        };
    }
    gibbs_sweep(model, &state)
}

/// Advance the chain by one iteration.
pub fn advance<M: ComponentModel>(
    model: &M,
    mut state: MixtureState<M::Component>,
    config: &SamplerConfig,
) -> Result<MixtureState<M::Component>> {
    state.iteration += 1;
    step(model, state, config)
}

fn iterate<M: ComponentModel>(
    model: &M,
    mut state: MixtureState<M::Component>,
    config: &SamplerConfig,
) -> Result<MixtureState<M::Component>> {
    let mut best: Option<(f64, MixtureState<M::Component>)> = None;
    let start = state.iteration;
    for t in 1..=config.iterations as u64 {
        state.iteration = start + t - 1;
        state = advance(model, state, config)?;
        if config.selection == Selection::MaxPosterior {
            let score = log_partition_posterior(model, &state.assignments)?;
            if best.as_ref().is_none_or(|b| score > b.0) {
                best = Some((score, state.clone()));
            }
        }
    }
    Ok(match best {
        Some((_, s)) => s,
        None => state,
    })
}

/// Run the sampler from a single component.
pub fn run<M: ComponentModel>(model: &M, config: &SamplerConfig) -> Result<MixtureState<M::Component>> {
    run_from(model, vec![0; model.len()], config)
}

/// Run the sampler from the given labels (components are drawn from their
/// members first).
pub fn run_from<M: ComponentModel>(
    model: &M,
    assignments: Vec<usize>,
    config: &SamplerConfig,
) -> Result<MixtureState<M::Component>> {
    let state = initial_state(model, assignments, config)?;
    iterate(model, state, config)
}

/// State at iteration zero: labels compacted, one component drawn per
/// group from its members.
pub fn initial_state<M: ComponentModel>(
    model: &M,
    assignments: Vec<usize>,
    config: &SamplerConfig,
) -> Result<MixtureState<M::Component>> {
    config.validate()?;
    if model.is_empty() {
        return Err(Error::usage("no observations to cluster"));
    }
    if assignments.len() != model.len() {
        return Err(Error::DimensionMismatch {
            expected: model.len(),
            found: assignments.len(),
        });
    }
    let k = assignments.iter().copied().max().unwrap_or(0) + 1;
    let mut members = vec![Vec::new(); k];
    for (i, &z) in assignments.iter().enumerate() {
        members[z].push(i);
    }
    members.retain(|m| !m.is_empty());
    let mut labels = vec![0; model.len()];
    let mut components = Vec::with_capacity(members.len());
    for (k, m) in members.iter().enumerate() {
        for &i in m {
            labels[i] = k;
        }
        let mut rng = key_stream(config.seed, 0, GIBBS_SLOT, tag::INIT, &[k as u64]);
        components.push(model.sample_component(m, m, &mut rng)?);
    }
    let mut state = MixtureState::new(labels, components, config.seed, 0)?;
    finalize(model, &mut state);
    Ok(state)
}

/// Continue from `previous` after appending new observations.
///
/// `model` covers the old observations (first `previous.len()` indices)
/// followed by the new ones. Old labels never change. Each new point starts
/// in the existing component that explains it best, or in one shared fresh
/// component when the prior predictive (weighted by `alpha`) beats every
/// existing component. Splits and merges only touch components made of new
/// points alone.
pub fn run_incremental<M: ComponentModel>(
    model: &M,
    previous: &MixtureState<M::Component>,
    config: &SamplerConfig,
) -> Result<MixtureState<M::Component>> {
    config.validate()?;
    previous.check()?;
    let old = previous.len();
    if model.len() < old {
        return Err(Error::usage("model has fewer observations than the previous state"));
    }
    if model.len() == old {
        return Ok(previous.clone());
    }
    let k = previous.num_components();
    let log_n: Vec<f64> = previous.counts.iter().map(|&c| (c as f64).ln()).collect();
    let log_alpha = model.alpha().ln();
    let init: Vec<usize> = (old..model.len())
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let mut best = (k, log_alpha + model.log_predictive(i, &[])?);
            for (j, comp) in previous.components.iter().enumerate() {
                let s = log_n[j] + model.loglik(comp, i);
                if s > best.1 {
                    best = (j, s);
                }
            }
            Ok(best.0)
        })
        .collect::<Result<_>>()?;
    let mut assignments = previous.assignments.clone();
    assignments.extend_from_slice(&init);
    let mut components = previous.components.clone();
    let fresh: Vec<usize> = (old..model.len()).filter(|&i| assignments[i] == k).collect();
    if !fresh.is_empty() {
        let mut rng = key_stream(config.seed, previous.iteration, GIBBS_SLOT, tag::INIT, &[k as u64]);
        components.push(model.sample_component(&fresh, &fresh, &mut rng)?);
    }
    let mut state = MixtureState::new(assignments, components, config.seed, previous.iteration)?;
    state.frozen = old;
    finalize(model, &mut state);
    let mut out = iterate(model, state, config)?;
    out.frozen = 0;
    Ok(out)
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;
    use crate::stats::{Niw, SuffStats};
    use nalgebra::{DMatrix, DVector};

    /// Scalar Gaussian with conjugate NIW, enough to exercise the machinery.
    pub struct Line {

        pub x: Vec<f64>,
        niw: Niw,
        alpha: f64,
    }

    impl Line {
        pub fn new(x: Vec<f64>) -> Self {
            Self {
                x,
                niw: Niw {
                    mu0: DVector::from_element(1, 0.0),
                    kappa: 0.1,
                    nu: 3.0,
                    psi: DMatrix::from_element(1, 1, 0.5),
                },
                alpha: 1.0,
            }
        }
    }

    impl ComponentModel for Line {
        type Component = (f64, f64);

        fn len(&self) -> usize {
            self.x.len()
        }

        fn alpha(&self) -> f64 {
            self.alpha
        }

        fn loglik(&self, c: &(f64, f64), i: usize) -> f64 {
            let r = self.x[i] - c.0;
            -0.5 * (crate::stats::LN_2PI + c.1.ln() + r * r / c.1)
        }

        fn sample_component(&self, members: &[usize], _: &[usize], rng: &mut StreamRng) -> Result<(f64, f64)> {
            let stats = SuffStats::from_rows(1, members.iter().map(|&i| std::slice::from_ref(&self.x[i])));
            let (mu, s) = self.niw.posterior(&stats).sample(rng)?;
            Ok((mu[0], s[(0, 0)]))
        }

        fn sample_prior(&self, rng: &mut StreamRng) -> Result<(f64, f64)> {
            let (mu, s) = self.niw.sample(rng)?;
            Ok((mu[0], s[(0, 0)]))
        }

        fn log_marginal(&self, members: &[usize]) -> Result<f64> {
            let stats = SuffStats::from_rows(1, members.iter().map(|&i| std::slice::from_ref(&self.x[i])));
            Ok(if stats.n == 0 { 0.0 } else { self.niw.log_marginal(&stats) })
        }

        fn log_predictive(&self, i: usize, members: &[usize]) -> Result<f64> {
            let stats = SuffStats::from_rows(1, members.iter().map(|&i| std::slice::from_ref(&self.x[i])));
            Ok(self.niw.posterior(&stats).log_predictive(&[self.x[i]]))
        }

        fn position(&self, i: usize) -> &[f64] {
            std::slice::from_ref(&self.x[i])
        }
    }

    pub fn line(x: Vec<f64>) -> Line {
        Line::new(x)
    }
}

#[cfg(test)]
mod tests {
    use super::tests_support::*;
    use super::*;

    fn two_blobs() -> Line {
        let mut x: Vec<f64> = (0..20).map(|i| (i as f64) * 0.05).collect();
        x.extend((0..20).map(|i| 50.0 + (i as f64) * 0.05));
        Line::new(x)
    }

    #[test]
    fn state_constructor_checks_labels() {
        assert!(MixtureState::new(vec![0, 2], vec![(0.0, 1.0); 2], 0, 0).is_err());
        assert!(MixtureState::new(vec![0, 0], vec![(0.0, 1.0); 2], 0, 0).is_err());
        let s = MixtureState::new(vec![1, 0, 1], vec![(0.0, 1.0); 2], 0, 0).unwrap();
        assert_eq!(s.counts(), &[1, 2]);
        s.check().unwrap();
    }

    #[test]
    fn sweep_keeps_separated_clusters() {
        let m = two_blobs();
        let z: Vec<usize> = (0..40).map(|i| i / 20).collect();
        let mut s = run_from(&m, z.clone(), &SamplerConfig { iterations: 1, ..Default::default() }).unwrap();
        for it in 0..20 {
            s.iteration = 100 + it;
            s = gibbs_sweep(&m, &s).unwrap();
            s.check().unwrap();
        }
        let z = s.assignments();
        assert!(z[..20].iter().all(|a| !z[20..].contains(a)));
    }

    #[test]
    fn sweep_can_open_components() {
        let m = two_blobs();
        let opened = (0..20).any(|seed| {
            let s = MixtureState::new(vec![0; 40], vec![(25.0, 600.0)], seed, 1).unwrap();
            let t = gibbs_sweep(&m, &s).unwrap();
            t.check().unwrap();
            t.num_components() > 1
        });
        assert!(opened);
    }

    #[test]
    fn split_separates_blobs() {
        let m = two_blobs();
        let mut accepted = 0;
        for seed in 0..10 {
            let s = MixtureState::new(vec![0; 40], vec![(25.0, 600.0)], seed, 1).unwrap();
            let (t, out) = propose_split(&m, &s, &SamplerConfig::default(), 0).unwrap();
            t.check().unwrap();
            if out.accepted {
                accepted += 1;
                assert_eq!(t.num_components(), 2);
            } else {
                assert_eq!(t, s);
            }
            assert!(out.log_acceptance <= 0.0);
        }
        assert!(accepted >= 8, "{accepted}");
    }

    #[test]
    fn merge_rejects_far_pair() {
        let m = two_blobs();
        let z: Vec<usize> = (0..40).map(|i| i / 20).collect();
        let s = MixtureState::new(z, vec![(0.5, 0.1), (50.5, 0.1)], 1, 1).unwrap();
        for slot in 0..20 {
            let (t, out) = propose_merge(&m, &s, &SamplerConfig::default(), slot).unwrap();
            assert!(!out.accepted);
            assert_eq!(t, s);
        }
    }

    #[test]
    fn impossible_moves_are_errors() {
        let m = Line::new(vec![0.0, 1.0]);
        let s = MixtureState::new(vec![0, 1], vec![(0.0, 1.0), (1.0, 1.0)], 0, 0).unwrap();
        assert!(propose_split(&m, &s, &SamplerConfig::default(), 0).is_err());
        let one = MixtureState::new(vec![0, 0], vec![(0.0, 1.0)], 0, 0).unwrap();
        assert!(propose_merge(&m, &one, &SamplerConfig::default(), 0).is_err());
    }

    #[test]
    fn run_is_deterministic() {
        let m = two_blobs();
        let cfg = SamplerConfig {
            iterations: 30,
            seed: 5,
            ..Default::default()
        };
        let a = run(&m, &cfg).unwrap();
        let b = run(&m, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.num_components(), 2);
    }

    #[test]
    fn worker_count_does_not_matter() {
        let m = two_blobs();
        let cfg = SamplerConfig {
            iterations: 20,
            seed: 9,
            ..Default::default()
        };
        let go = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| run(&m, &cfg).unwrap())
        };
        assert_eq!(go(1), go(4));
    }

    #[test]
    fn incremental_freezes_old_labels() {
        let old = Line::new((0..20).map(|i| i as f64 * 0.05).collect());
        let prev = run(&old, &SamplerConfig { iterations: 10, seed: 2, ..Default::default() }).unwrap();
        let mut x = old.x.clone();
        x.extend((0..20).map(|i| 80.0 + i as f64 * 0.05));
        let both = Line::new(x);
        let next = run_incremental(&both, &prev, &SamplerConfig { iterations: 10, seed: 3, ..Default::default() }).unwrap();
        assert_eq!(&next.assignments()[..20], prev.assignments());
        assert!(next.num_components() > prev.num_components());
        next.check().unwrap();
        assert_eq!(run_incremental(&old, &prev, &SamplerConfig::default()).unwrap(), prev);
    }

    #[test]
    fn posterior_score_prefers_true_split() {
        let m = two_blobs();
        let one = vec![0; 40];
        let two: Vec<usize> = (0..40).map(|i| i / 20).collect();
        assert!(log_partition_posterior(&m, &two).unwrap() > log_partition_posterior(&m, &one).unwrap());
    }
}

#[cfg(test)]
mod partition_tests {
    use super::tests_support::*;
    use super::*;
    use std::collections::HashMap;

    fn canonical(z: &[usize]) -> Vec<usize> {
        let mut map = HashMap::new();
        z.iter()
            .map(|&l| {
                let n = map.len();
                *map.entry(l).or_insert(n)
            })
            .collect()
    }

    fn all_partitions(n: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![0]];
        for _ in 1..n {
            let mut next = Vec::new();
            for p in &out {
                let k = p.iter().max().unwrap() + 1;
                for l in 0..=k {
                    let mut q = p.clone();
                    q.push(l);
                    next.push(q);
                }
            }
            out = next;
        }
        out
    }

    #[test]
    fn matches_enumerated_posterior() {
        let m = line(vec![-1.2, -0.9, 0.1, 0.4, 1.5]);
        let parts = all_partitions(m.len());
        let logp: Vec<f64> = parts.iter().map(|p| log_partition_posterior(&m, p).unwrap()).collect();
        let z = log_sum_exp(&logp);
        let exact: HashMap<Vec<usize>, f64> = parts.into_iter().zip(logp.iter().map(|l| (l - z).exp())).collect();

        let cfg = SamplerConfig {
            iterations: 1,
            seed: 77,
            ..Default::default()
        };
        let mut state = run(&m, &cfg).unwrap();
        let mut hist: HashMap<Vec<usize>, f64> = HashMap::new();
        let iters = 50_000;
        for t in 0..iters {
            state.iteration = 10 + t;
            state = step(&m, state, &cfg).unwrap();
            *hist.entry(canonical(state.assignments())).or_default() += 1.0 / iters as f64;
        }
        let tv: f64 = 0.5 * exact.iter().map(|(p, e)| (hist.get(p).copied().unwrap_or(0.0) - e).abs()).sum::<f64>();
        assert!(tv <= 0.05, "tv = {tv}");
    }
}

