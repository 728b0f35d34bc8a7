//! Gradient aggregation: conflict detection, normal-plane projection,
//! historical-gradient attention rescaling, and the combined projection
//! aggregator with a plain-averaging baseline.
//!
//! Two gradients conflict when their cosine similarity is negative.
//! Aggregation first rescales every client gradient by softmax attention
//! against the previous round's aggregate, then, per client, projects the
//! working copy onto the normal plane of every other client's rescaled
//! gradient it still conflicts with, and finally averages.

use crate::error::{Error, Result};
use crate::gradset::{mean_sets, GradientSet};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

/// One client's general-model gradient for one round.
#[derive(Debug, Clone)]
pub struct ClientGradient<T: Scalar> {
    pub client_id: u32,
    pub round: u32,
    pub grads: GradientSet<T>,
}

/// Carry-over state between rounds: the previous aggregate and an optional
/// override for the attention score divisor (defaults to the per-layer
/// column count).
#[derive(Debug, Clone, Default)]
pub struct HistoryState<T: Scalar> {
    pub prev_aggregate: Option<GradientSet<T>>,
    pub d_scale_override: Option<f64>,
}

impl<T: Scalar> HistoryState<T> {
    pub fn empty() -> Self {
        HistoryState {
            prev_aggregate: None,
            d_scale_override: None,
        }
    }
}

/// How a layer gradient is shaped for the attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RescaleMode {
    /// Each layer gradient viewed as [output_dim, rest]; attention mixes
    /// output rows. The default reading.
    PerLayerMatrix,
    /// The whole set as one flat vector: the score is a scalar, softmax of
    /// a scalar is 1, so rescaling degenerates to the identity. Kept for
    /// comparison.
    FlatVector,
}

/// Aggregator switches; the full method enables both stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GpConfig {
    pub rescale: bool,
    pub project: bool,
    pub rescale_mode: RescaleMode,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            rescale: true,
            project: true,
            rescale_mode: RescaleMode::PerLayerMatrix,
        }
    }
}

/// One visited (owner, opponent) pair with cosines around the projection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub owner: u32,
    pub opponent: u32,
    pub cos_before: f64,
    pub cos_after: f64,
    pub projected: bool,
}

/// Structured record of one aggregation call.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregationDiagnostics {
    pub round: u32,
    pub conflicts_detected: usize,
    pub pairs: Vec<PairRecord>,
    /// Per owner (in client order): the opponent visit order used.
    pub projection_order: Vec<Vec<u32>>,
    pub zero_norm_skipped: usize,
}

impl AggregationDiagnostics {
    /// Projection events where `client` was the owner.
    pub fn conflicts_for(&self, client: u32) -> usize {
        self.pairs
            .iter()
            .filter(|p| p.owner == client && p.projected)
            .count()
    }
}

fn cosine<T: Scalar>(a: &GradientSet<T>, b: &GradientSet<T>) -> Result<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok(a.dot(b)? / (na * nb))
}

/// Definition of conflict: negative inner product (cos < 0). Zero-norm
/// operands never conflict.
pub fn is_conflicting<T: Scalar>(gi: &GradientSet<T>, gj: &GradientSet<T>) -> Result<bool> {
    gi.ensure_same_schema(gj, "is_conflicting")?;
    if gi.norm() == 0.0 || gj.norm() == 0.0 {
        return Ok(false);
    }
    Ok(gi.dot(gj)? < 0.0)
}

/// Project `g_k` onto the normal plane of `g_i`:
/// `g_k - (<g_k,g_i> / |g_i|^2) g_i`. Errors on a zero-norm `g_i`.
pub fn project<T: Scalar>(g_k: &GradientSet<T>, g_i: &GradientSet<T>) -> Result<GradientSet<T>> {
    g_k.ensure_same_schema(g_i, "project")?;
    let n2 = g_i.dot(g_i)?;
    if n2 == 0.0 {
        return Err(Error::Aggregation(
            "cannot project onto the normal plane of a zero gradient".into(),
        ));
    }
    let coef = g_k.dot(g_i)? / n2;
    let mut out = g_k.clone();
    out.add_scaled(g_i, T::from_f64(-coef))?;
    Ok(out)
}

/// Matrix view of a layer gradient: `[r, c]` with `r` the output dimension
/// (last axis for >= 2-d tensors, 1 for vectors) and `c` everything else.
fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    if shape.len() >= 2 {
        let r = *shape.last().unwrap();
        (r, shape.iter().product::<usize>() / r)
    } else {
        (1, shape.iter().product())
    }
}

fn rescale_layer<T: Scalar>(gk: &Tensor<T>, hist: &Tensor<T>, d_override: Option<f64>) -> Tensor<T> {
    let (r, c) = matrix_dims(gk.shape());
    if r == 1 {
        // softmax over a 1x1 score is exactly 1.
        return gk.clone();
    }
    let d = d_override.unwrap_or(c as f64);
    // Row-major layout with the output axis last means element (row a of
    // the matrix view, column j) lives at flat j*r + a.
    let gv = |a: usize, j: usize| gk.data()[j * r + a].to_f64();
    let hv = |a: usize, j: usize| hist.data()[j * r + a].to_f64();

    let mut scores = vec![0.0f64; r * r];
    for a in 0..r {
        for b in 0..r {
            let mut s = 0.0;
            for j in 0..c {
                s += gv(a, j) * hv(b, j);
            }
            scores[a * r + b] = s / d;
        }
    }
    // Row softmax (stable).
    for a in 0..r {
        let row = &mut scores[a * r..(a + 1) * r];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    let mut out = vec![T::zero(); gk.numel()];
    for a in 0..r {
        for j in 0..c {
            let mut acc = 0.0;
            for b in 0..r {
                acc += scores[a * r + b] * gv(b, j);
            }
            out[j * r + a] = T::from_f64(acc);
        }
    }
    Tensor::new(gk.shape().to_vec(), out).expect("shape preserved")
}

/// Rescale a client gradient by softmax attention against the previous
/// round's aggregate. Without history this is the identity.
pub fn attention_rescale<T: Scalar>(
    g_k: &GradientSet<T>,
    history: &HistoryState<T>,
    mode: RescaleMode,
) -> Result<GradientSet<T>> {
    let prev = match &history.prev_aggregate {
        None => return Ok(g_k.clone()),
        Some(prev) => prev,
    };
    g_k.ensure_same_schema(prev, "attention_rescale")?;
    if matches!(mode, RescaleMode::FlatVector) {
        // One scalar score; softmax(scalar) = 1; identity by construction.
        return Ok(g_k.clone());
    }
    let mut out = GradientSet::new();
    for (name, gk) in g_k.iter() {
        let hist = prev.get(name).expect("schema checked");
        out.insert(name, rescale_layer(gk, hist, history.d_scale_override))?;
    }
    Ok(out)
}

/// Unweighted FedAvg baseline (equal shard sizes).
pub fn fedavg_aggregate<T: Scalar>(grads: &[ClientGradient<T>]) -> Result<GradientSet<T>> {
    validate_batch(grads)?;
    let sets: Vec<GradientSet<T>> = grads.iter().map(|g| g.grads.clone()).collect();
    mean_sets(&sets)
}

fn validate_batch<T: Scalar>(grads: &[ClientGradient<T>]) -> Result<()> {
    let first = grads
        .first()
        .ok_or_else(|| Error::Aggregation("no client gradients to aggregate".into()))?;
    for g in &grads[1..] {
        first
            .grads
            .ensure_same_schema(&g.grads, "client gradient batch")?;
        if g.round != first.round {
            return Err(Error::Aggregation(format!(
                "mixed rounds in one aggregation: {} and {}",
                first.round, g.round
            )));
        }
    }
    Ok(())
}

/// Full projection aggregation with both stages enabled.
pub fn gp_aggregate<T: Scalar>(
    grads: &[ClientGradient<T>],
    history: &HistoryState<T>,
    rng_seed: u64,
) -> Result<(GradientSet<T>, AggregationDiagnostics)> {
    gp_aggregate_with(GpConfig::default(), grads, history, rng_seed)
}

/// Projection aggregation with configurable stages (used for ablations:
/// projection-only and attention-only variants).
pub fn gp_aggregate_with<T: Scalar>(
    cfg: GpConfig,
    grads: &[ClientGradient<T>],
    history: &HistoryState<T>,
    rng_seed: u64,
) -> Result<(GradientSet<T>, AggregationDiagnostics)> {
    validate_batch(grads)?;
    let round = grads[0].round;
    let k = grads.len();

    let rescaled: Vec<GradientSet<T>> = if cfg.rescale {
        grads
            .iter()
            .map(|g| attention_rescale(&g.grads, history, cfg.rescale_mode))
            .collect::<Result<_>>()?
    } else {
        grads.iter().map(|g| g.grads.clone()).collect()
    };

    // Per-owner projection loops are independent: each reads the shared
    // rescaled set and mutates only its own copy, so they can fan out.
    struct OwnerResult<T: Scalar> {
        projected: GradientSet<T>,
        pairs: Vec<PairRecord>,
        order: Vec<u32>,
        zero_skipped: usize,
    }

    let owners: Vec<Result<OwnerResult<T>>> = crate::parallel::map_indexed(k, true, |oi| {
        let owner_id = grads[oi].client_id;
        let mut work = rescaled[oi].clone();
        let mut pairs = Vec::new();
        let mut zero_skipped = 0usize;
        let mut order: Vec<usize> = (0..k).filter(|&i| i != oi).collect();
        if cfg.project {
            let mut rng = SplitMix64::derive(rng_seed, &[round as u64, owner_id as u64]);
            rng.shuffle(&mut order);
        }
        let order_ids: Vec<u32> = order.iter().map(|&i| grads[i].client_id).collect();
        if cfg.project {
            for &i in &order {
                let opponent = &rescaled[i];
                if opponent.norm() == 0.0 {
                    zero_skipped += 1;
                    continue;
                }
                let cos_before = cosine(&work, opponent)?;
                let conflict = work.dot(opponent)? < 0.0;
                if conflict {
                    work = project(&work, opponent)?;
                }
                let cos_after = cosine(&work, opponent)?;
                pairs.push(PairRecord {
                    owner: owner_id,
                    opponent: grads[i].client_id,
                    cos_before,
                    cos_after,
                    projected: conflict,
                });
            }
        }
        Ok(OwnerResult {
            projected: work,
            pairs,
            order: order_ids,
        zero_skipped,
        })
    });

    let mut projected = Vec::with_capacity(k);
    let mut diagnostics = AggregationDiagnostics {
        round,
        conflicts_detected: 0,
        pairs: Vec::new(),
        projection_order: Vec::new(),
        zero_norm_skipped: 0,
    };
    for owner in owners {
        let owner = owner?;
        diagnostics.conflicts_detected +=
            owner.pairs.iter().filter(|p| p.projected).count();
        diagnostics.pairs.extend(owner.pairs);
        diagnostics.projection_order.push(owner.order);
        diagnostics.zero_norm_skipped += owner.zero_skipped;
        projected.push(owner.projected);
    }

    let aggregate = mean_sets(&projected)?;
    Ok((aggregate, diagnostics))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(vals: &[f64]) -> GradientSet<f64> {
        let mut g = GradientSet::new();
        g.insert("g", Tensor::new(vec![vals.len()], vals.to_vec()).unwrap())
            .unwrap();
        g
    }

    fn client(id: u32, vals: &[f64]) -> ClientGradient<f64> {
        ClientGradient {
            client_id: id,
            round: 0,
            grads: set(vals),
        }
    }

    #[test]
    fn conflict_definition() {
        // Orthogonal: boundary is strict < 0.
        assert!(!is_conflicting(&set(&[1.0, 0.0]), &set(&[0.0, 1.0])).unwrap());
        // dot = -1.
        assert!(is_conflicting(&set(&[1.0, 0.0]), &set(&[-1.0, 1.0])).unwrap());
        // Self-agreement.
        let g = set(&[0.3, -0.7]);
        assert!(!is_conflicting(&g, &g).unwrap());
        // Zero-norm operand never conflicts.
        assert!(!is_conflicting(&set(&[0.0, 0.0]), &set(&[-1.0, 0.0])).unwrap());
    }

    #[test]
    fn projection_hand_cases() {
        // (1,0) off (-1,1): (1,0) - (-1/2)(-1,1) = (0.5, 0.5).
        let p = project(&set(&[1.0, 0.0]), &set(&[-1.0, 1.0])).unwrap();
        assert_eq!(p.flatten(), vec![0.5, 0.5]);

        // Orthogonal leaves g_k unchanged.
        let gk = set(&[2.0, 0.0]);
        let p = project(&gk, &set(&[0.0, 3.0])).unwrap();
        assert_eq!(p, gk);

        // Full opposition annihilates.
        let p = project(&set(&[1.0, -2.0]), &set(&[-1.0, 2.0])).unwrap();
        assert!(p.flatten().iter().all(|&v| v.abs() < 1e-15));

        // Zero opponent is a guarded error.
        assert!(project(&gk, &set(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn projection_result_is_orthogonal_and_idempotent() {
        let mut rng = SplitMix64::new(40);
        for _ in 0..100 {
            let dim = 2 + rng.below(64) as usize;
            let a = Tensor::<f64>::randn(&[dim], 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[dim], 1.0, &mut rng);
            let mut ga = GradientSet::new();
            ga.insert("g", a).unwrap();
            let mut gb = GradientSet::new();
            gb.insert("g", b).unwrap();
            let p = project(&ga, &gb).unwrap();
            let denom = p.norm() * gb.norm();
            if denom > 0.0 {
                assert!(p.dot(&gb).unwrap().abs() / denom < 1e-12);
            }
            let pp = project(&p, &gb).unwrap();
            let scale = p.norm().max(1e-12);
            for (x, y) in pp.flatten().iter().zip(p.flatten()) {
                assert!((x - y).abs() / scale < 1e-6);
            }
        }
    }

    #[test]
    fn rescale_without_history_is_identity() {
        let g = set(&[0.1, -0.2, 0.3]);
        let out = attention_rescale(&g, &HistoryState::empty(), RescaleMode::PerLayerMatrix)
            .unwrap();
        assert_eq!(g, out);
    }

    #[test]
    fn rescale_single_row_layer_unchanged() {
        // A bias-like 1-d tensor has r = 1: softmax of a 1x1 score is 1.
        let g = set(&[0.5, -1.5, 2.5]);
        let history = HistoryState {
            prev_aggregate: Some(set(&[1.0, 1.0, 1.0])),
            d_scale_override: None,
        };
        let out = attention_rescale(&g, &history, RescaleMode::PerLayerMatrix).unwrap();
        assert_eq!(g, out);
    }

    #[test]
    fn flat_mode_is_identity() {
        let mut g = GradientSet::new();
        g.insert("w", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let history = HistoryState {
            prev_aggregate: Some(g.clone()),
            d_scale_override: None,
        };
        let out = attention_rescale(&g, &history, RescaleMode::FlatVector).unwrap();
        assert_eq!(g, out);
    }

    #[test]
    fn rescale_matrix_case_matches_scripted_oracle() {
        // G_k = G' = I (2x2), d = c = 2. Scripted double-precision
        // evaluation: scores = G G'^T / 2 = I/2, row softmax, A G.
        let mut g = GradientSet::new();
        g.insert("w", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let history = HistoryState {
            prev_aggregate: Some(g.clone()),
            d_scale_override: None,
        };
        let out = attention_rescale(&g, &history, RescaleMode::PerLayerMatrix).unwrap();

        // Oracle, written out step by step on the matrix view.
        let gm = [[1.0f64, 0.0], [0.0, 1.0]]; // view[a][j] = data[j*2+a] = I
        let mut scores = [[0.0f64; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                let mut s = 0.0;
                for j in 0..2 {
                    s += gm[a][j] * gm[b][j];
                }
                scores[a][b] = s / 2.0;
            }
        }
        let mut attn = [[0.0f64; 2]; 2];
        for a in 0..2 {
            let m = scores[a][0].max(scores[a][1]);
            let e = [(scores[a][0] - m).exp(), (scores[a][1] - m).exp()];
            let z = e[0] + e[1];
            attn[a] = [e[0] / z, e[1] / z];
        }
        let mut want = [[0.0f64; 2]; 2];
        for a in 0..2 {
            for j in 0..2 {
                for b in 0..2 {
                    want[a][j] += attn[a][b] * gm[b][j];
                }
            }
        }
        let w = out.get("w").unwrap();
        for a in 0..2 {
            for j in 0..2 {
                let got = w.data()[j * 2 + a];
                assert!((got - want[a][j]).abs() < 1e-15, "({a},{j})");
            }
        }
        // Sanity: the expected mix weight is softmax([0.5, 0]).
        let hot = 0.5f64.exp() / (0.5f64.exp() + 1.0);
        assert!((w.data()[0] - hot).abs() < 1e-12);
    }

    #[test]
    fn fedavg_cases() {
        assert_eq!(
            fedavg_aggregate(&[client(0, &[1.0, 2.0])]).unwrap().flatten(),
            vec![1.0, 2.0]
        );
        assert_eq!(
            fedavg_aggregate(&[client(0, &[1.0, 0.0]), client(1, &[0.0, 1.0])])
                .unwrap()
                .flatten(),
            vec![0.5, 0.5]
        );
        // Conflict annihilation the projection method avoids.
        assert_eq!(
            fedavg_aggregate(&[client(0, &[1.0, 0.0]), client(1, &[-1.0, 0.0])])
                .unwrap()
                .flatten(),
            vec![0.0, 0.0]
        );
        assert!(fedavg_aggregate::<f64>(&[]).is_err());
    }

    #[test]
    fn gp_single_client_is_rescaled_gradient() {
        let (agg, diag) =
            gp_aggregate(&[client(0, &[1.0, -2.0])], &HistoryState::empty(), 7).unwrap();
        assert_eq!(agg.flatten(), vec![1.0, -2.0]);
        assert_eq!(diag.conflicts_detected, 0);
    }

    #[test]
    fn gp_hand_stepped_two_client_case() {
        // The worked example: (1,0) and (-1,1) aggregate to (0.25, 0.75).
        let grads = [client(0, &[1.0, 0.0]), client(1, &[-1.0, 1.0])];
        let (agg, diag) = gp_aggregate(&grads, &HistoryState::empty(), 123).unwrap();
        let flat = agg.flatten();
        assert!((flat[0] - 0.25).abs() < 1e-12 && (flat[1] - 0.75).abs() < 1e-12);
        assert_eq!(diag.conflicts_detected, 2);
        assert_eq!(diag.pairs.len(), 2);
        for p in &diag.pairs {
            assert!(p.cos_before < 0.0 && p.cos_after.abs() < 1e-9);
        }
    }

    #[test]
    fn gp_identical_gradients_pass_through() {
        let grads = [
            client(0, &[0.5, 0.5]),
            client(1, &[0.5, 0.5]),
            client(2, &[0.5, 0.5]),
        ];
        let (agg, diag) = gp_aggregate(&grads, &HistoryState::empty(), 1).unwrap();
        assert_eq!(agg.flatten(), vec![0.5, 0.5]);
        assert_eq!(diag.conflicts_detected, 0);
    }

    #[test]
    fn gp_no_conflict_equals_fedavg_exactly() {
        let mut rng = SplitMix64::new(41);
        for _ in 0..20 {
            // Nonnegative components guarantee pairwise cos >= 0.
            let grads: Vec<ClientGradient<f32>> = (0..4)
                .map(|id| {
                    let vals: Vec<f32> =
                        (0..16).map(|_| rng.uniform() as f32).collect();
                    let mut g = GradientSet::new();
                    g.insert("g", Tensor::new(vec![16], vals).unwrap()).unwrap();
                    ClientGradient {
                        client_id: id,
                        round: 3,
                        grads: g,
                    }
                })
                .collect();
            let (agg, diag) = gp_aggregate(&grads, &HistoryState::empty(), 9).unwrap();
            let avg = fedavg_aggregate(&grads).unwrap();
            assert_eq!(agg, avg);
            assert_eq!(diag.conflicts_detected, 0);
        }
    }

    #[test]
    fn gp_zero_norm_opponent_skipped() {
        let grads = [client(0, &[1.0, 0.0]), client(1, &[0.0, 0.0])];
        let (agg, diag) = gp_aggregate(&grads, &HistoryState::empty(), 5).unwrap();
        assert_eq!(diag.zero_norm_skipped, 1);
        assert_eq!(agg.flatten(), vec![0.5, 0.0]);
    }

    #[test]
    fn gp_deterministic_for_seed() {
        let mut rng = SplitMix64::new(42);
        let grads: Vec<ClientGradient<f32>> = (0..5)
            .map(|id| {
                let mut g = GradientSet::new();
                g.insert("g", Tensor::<f32>::randn(&[32], 1.0, &mut rng))
                    .unwrap();
                ClientGradient {
                    client_id: id,
                    round: 2,
                    grads: g,
                }
            })
            .collect();
        let history = HistoryState::empty();
        let (a1, d1) = gp_aggregate(&grads, &history, 77).unwrap();
        let (a2, d2) = gp_aggregate(&grads, &history, 77).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(d1.projection_order, d2.projection_order);
        let (a3, _) = gp_aggregate(&grads, &history, 78).unwrap();
        // A different seed may reorder projections; determinism only holds
        // per seed. (The aggregates can coincide when no conflicts exist.)
        let _ = a3;
    }

    #[test]
    fn diagnostics_serialize() {
        let grads = [client(0, &[1.0, 0.0]), client(1, &[-1.0, 1.0])];
        let (_, diag) = gp_aggregate(&grads, &HistoryState::empty(), 11).unwrap();
        let json = serde_json::to_string(&diag).unwrap();
        assert!(json.contains("conflicts_detected"));
        let back: AggregationDiagnostics = serde_json::from_str(&json).unwrap();
        assert_eq!(back.conflicts_detected, diag.conflicts_detected);
    }
}
