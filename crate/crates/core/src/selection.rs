//! Visual-token selection: attention-guided top-k pruning followed by merging
//! of the discarded tokens.
//!
//! The counting rules here ([`keep_count`], [`merge_count`]) are the single
//! source of truth for token counts; the cost model in [`crate::flops`] calls
//! the same functions.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::AttentionRecord;
use crate::error::{Error, Result};
use crate::tensor::{round_count, Scalar, Tensor};
use crate::videotok::{TokenBatch, TokenLayout, VisualOrigin};

/// Which attention columns a visual token's pruning score is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorePolicy {
    /// Attention to the class token only.
    Class,
    /// Attention to the visual tokens of the middle temporal slice.
    MidFrame,
    /// κ-weighted attention to the class token plus the pose tokens.
    ClassPose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergePolicy {
    None,
    /// All-pairs cosine matching among discarded tokens, any merge rate.
    Poguise,
    /// Alternating two-set matching; limited to removing half the input.
    Bipartite,
}

/// Per-token vectors the merge similarity is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimilarityFeature {
    Q,
    K,
    /// Rows of the head-averaged attention matrix.
    #[serde(rename = "ATTN")]
    Attn,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Class-vs-pose balance in the pruning score.
    pub kappa: f64,
    /// Fraction of alive visual tokens kept by pruning.
    pub rho: f64,
    /// Fraction of discarded tokens that become merge sources.
    pub lambda: f64,
    pub score_policy: ScorePolicy,
    pub merge_policy: MergePolicy,
    pub similarity_feature: SimilarityFeature,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            kappa: 0.5,
            rho: 0.6,
            lambda: 0.3,
            score_policy: ScorePolicy::ClassPose,
            merge_policy: MergePolicy::Poguise,
            similarity_feature: SimilarityFeature::K,
        }
    }
}

impl SelectionConfig {
    /// Pruning by class attention only, no merging.
    pub fn class_only(rho: f64) -> Self {
        Self { rho, score_policy: ScorePolicy::Class, merge_policy: MergePolicy::None, ..Self::default() }
    }

    /// Keeps every token and merges nothing.
    pub fn disabled() -> Self {
        Self { rho: 1.0, merge_policy: MergePolicy::None, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(Error::config(format!("kappa must lie in [0, 1], got {}", self.kappa)));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return Err(Error::config(format!("lambda must lie in (0, 1], got {}", self.lambda)));
        }
        if self.merge_policy == MergePolicy::Bipartite && self.lambda > 0.5 {
            return Err(bipartite_limit(self.lambda));
        }
        Ok(())
    }

    /// Visual-token counts of one stage applied to `alive` tokens.
    pub fn stage_counts(&self, alive: usize) -> StageCounts {
        let kept = keep_count(alive, self.rho);
        let discarded = alive - kept;
        let merged = merge_count(discarded, self.lambda, self.merge_policy);
        StageCounts { alive, kept, discarded, merged }
    }

    /// Visual counts before the first stage and after each of `stages` stages.
    pub fn schedule(&self, visual: usize, stages: usize) -> Vec<usize> {
        let mut out = vec![visual];
        let mut n = visual;
        for _ in 0..stages {
            n = self.stage_counts(n).survivors();
            out.push(n);
        }
        out
    }
}

fn bipartite_limit(lambda: f64) -> Error {
    Error::config(format!(
        "bipartite matching can remove at most half of its input (lambda <= 0.5), got lambda = {lambda}"
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageCounts {
    pub alive: usize,
    pub kept: usize,
    pub discarded: usize,
    pub merged: usize,
}

impl StageCounts {
    pub fn survivors(&self) -> usize {
        self.kept + self.merged
    }
}

/// `N_sel`: nearest integer to `alive·ρ` (ties down), at least one.
pub fn keep_count(alive: usize, rho: f64) -> usize {
    if alive == 0 {
        return 0;
    }
    round_count(alive as f64 * rho).min(alive)
}

/// `N_merge`: nearest integer to `discarded·λ` (ties down), at least one, and
/// zero when fewer than two tokens were discarded.
pub fn merge_count(discarded: usize, lambda: f64, policy: MergePolicy) -> usize {
    if policy == MergePolicy::None || discarded < 2 {
        return 0;
    }
    round_count(discarded as f64 * lambda).min(discarded)
}

/// Pruning score of every visual token in `batch`, read from the head-averaged
/// attention of the preceding layer.
pub fn prune_scores<F: Scalar>(attn: &Tensor<F>, batch: &TokenBatch, cfg: &SelectionConfig) -> Result<Vec<F>> {
    let layout = batch.layout;
    let n = layout.total();
    if attn.dims() != [n, n] {
        return Err(Error::shape(format!("attention {:?} does not cover {n} tokens", attn.dims())));
    }
    let vs = layout.visual_start();
    let rows = (0..layout.visual).map(|i| attn.row(vs + i));
    let scores = match cfg.score_policy {
        ScorePolicy::Class => rows.map(|r| r[0]).collect(),
        ScorePolicy::ClassPose => {
            if layout.pose == 0 {
                return Err(Error::config("class+pose scoring needs pose tokens"));
            }
            let kappa = F::lit(cfg.kappa);
            let rest = F::one() - kappa;
            rows.map(|r| {
                let pose: F = r[1..=layout.pose].iter().copied().sum();
                r[0] * kappa + pose * rest
            })
            .collect()
        }
        ScorePolicy::MidFrame => {
            let mid = batch.grid.0 / 2;
            let cols: Vec<usize> =
                batch.visual_origin.iter().enumerate().filter(|(_, o)| o.t == mid).map(|(j, _)| vs + j).collect();
            rows.map(|r| cols.iter().map(|&j| r[j]).sum()).collect()
        }
    };
    Ok(scores)
}

/// Descending by value, ascending by index on ties.
fn rank_desc<F: Scalar>(values: &[F]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// Indices of the `keep_count` highest scores and of the rest, each in
/// ascending index order.
pub fn topk_prune<F: Scalar>(scores: &[F], rho: f64) -> (Vec<usize>, Vec<usize>) {
    let k = keep_count(scores.len(), rho);
    let ranked = rank_desc(scores);
    let mut kept = ranked[..k].to_vec();
    let mut discarded = ranked[k..].to_vec();
    kept.sort_unstable();
    discarded.sort_unstable();
    (kept, discarded)
}

/// `(source, candidate)` pairs, as row indices into the discarded set, sorted
/// by source.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergePlan {
    pub pairs: Vec<(usize, usize)>,
}

/// Cosine similarity matrix of the rows of `features`; rows with zero norm
/// have similarity 0 to everything.
pub fn cosine_similarity<F: Scalar>(features: &Tensor<F>) -> Result<Tensor<F>> {
    let (n, _) = features.shape2()?;
    let dots = features.matmul(&features.transpose2()?)?;
    let norms: Vec<F> = (0..n).map(|i| dots.row(i)[i].sqrt()).collect();
    let mut s = dots;
    for i in 0..n {
        for j in 0..n {
            let denom = norms[i] * norms[j];
            let v = &mut s.row_mut(i)[j];
            *v = if denom > F::zero() { *v / denom } else { F::zero() };
        }
    }
    Ok(s)
}

/// Plan the all-pairs merge: each token's candidate is its most similar other
/// token, and the `merge_count` tokens with the most similar candidates
/// become sources. Fewer than two tokens gives an empty plan.
pub fn poguise_plan<F: Scalar>(features: &Tensor<F>, lambda: f64) -> Result<MergePlan> {
    let (n, _) = features.shape2()?;
    if n < 2 {
        return Ok(MergePlan::default());
    }
    let s = cosine_similarity(features)?;
    let mut candidate = vec![0usize; n];
    let mut best = vec![F::neg_infinity(); n];
    for i in 0..n {
        for (j, &v) in s.row(i).iter().enumerate() {
            // strict comparison keeps the lowest index on ties
            if j != i && v > best[i] {
                best[i] = v;
                candidate[i] = j;
            }
        }
    }
    let k = merge_count(n, lambda, MergePolicy::Poguise);
    let mut sources = rank_desc(&best)[..k].to_vec();
    sources.sort_unstable();
    Ok(MergePlan { pairs: sources.into_iter().map(|i| (i, candidate[i])).collect() })
}

/// Plan the two-set merge: even rows are matched against odd rows and the
/// `merge_count` best-matched even rows merge into their partners.
pub fn bipartite_plan<F: Scalar>(features: &Tensor<F>, lambda: f64) -> Result<MergePlan> {
    let (n, _) = features.shape2()?;
    if lambda > 0.5 {
        return Err(bipartite_limit(lambda));
    }
    if n < 2 {
        return Ok(MergePlan::default());
    }
    let r = merge_count(n, lambda, MergePolicy::Bipartite);
    if 2 * r > n {
        return Err(bipartite_limit(lambda));
    }
    let s = cosine_similarity(features)?;
    let set_a: Vec<usize> = (0..n).step_by(2).collect();
    let mut best = Vec::with_capacity(set_a.len());
    let mut partner = Vec::with_capacity(set_a.len());
    for &a in &set_a {
        let mut bv = F::neg_infinity();
        let mut bj = 1;
        for b in (1..n).step_by(2) {
            let v = s.row(a)[b];
            if v > bv {
                bv = v;
                bj = b;
            }
        }
        best.push(bv);
        partner.push(bj);
    }
    let mut chosen = rank_desc(&best)[..r].to_vec();
    chosen.sort_unstable();
    Ok(MergePlan { pairs: chosen.into_iter().map(|i| (set_a[i], partner[i])).collect() })
}

/// Average each planned pair of rows of `tokens`.
pub fn merge_rows<F: Scalar>(tokens: &Tensor<F>, plan: &MergePlan) -> Result<Option<Tensor<F>>> {
    if plan.pairs.is_empty() {
        return Ok(None);
    }
    let d = tokens.last_dim();
    let half = F::lit(0.5);
    let mut data = Vec::with_capacity(plan.pairs.len() * d);
    for &(s, c) in &plan.pairs {
        data.extend(tokens.row(s).iter().zip(tokens.row(c)).map(|(&a, &b)| (a + b) * half));
    }
    Tensor::new(vec![plan.pairs.len(), d], data).map(Some)
}

/// Merged tokens from the discarded set `x_disc`, matched on `features`.
pub fn poguise_merge<F: Scalar>(
    x_disc: &Tensor<F>,
    features: &Tensor<F>,
    lambda: f64,
) -> Result<(MergePlan, Option<Tensor<F>>)> {
    check_rows(x_disc, features)?;
    let plan = poguise_plan(features, lambda)?;
    let merged = merge_rows(x_disc, &plan)?;
    Ok((plan, merged))
}

/// Two-set baseline counterpart of [`poguise_merge`].
pub fn bipartite_merge<F: Scalar>(
    x_disc: &Tensor<F>,
    features: &Tensor<F>,
    lambda: f64,
) -> Result<(MergePlan, Option<Tensor<F>>)> {
    check_rows(x_disc, features)?;
    let plan = bipartite_plan(features, lambda)?;
    let merged = merge_rows(x_disc, &plan)?;
    Ok((plan, merged))
}

fn check_rows<F: Scalar>(x: &Tensor<F>, features: &Tensor<F>) -> Result<()> {
    if x.dims()[0] != features.dims()[0] {
        return Err(Error::shape(format!("{} tokens but {} feature rows", x.dims()[0], features.dims()[0])));
    }
    Ok(())
}

/// Status of a visual token at one selection stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenStatus {
    Kept,
    MergedSource,
    MergedCandidate,
    Dropped,
}

impl TokenStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TokenStatus::Kept => "kept",
            TokenStatus::MergedSource => "merged-source",
            TokenStatus::MergedCandidate => "merged-candidate",
            TokenStatus::Dropped => "dropped",
        }
    }
}

/// What one selection stage did. Indices refer to positions in the visual
/// set the stage received.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    pub layer: usize,
    pub kept: Vec<usize>,
    /// `(source, candidate)` pairs.
    pub merge_pairs: Vec<(usize, usize)>,
    /// Discarded tokens that took part in no merge.
    pub dropped: Vec<usize>,
    /// Origins of the visual set before the stage.
    pub origins: Vec<VisualOrigin>,
}

impl SelectionOutcome {
    pub fn statuses(&self) -> Vec<TokenStatus> {
        let mut st = vec![TokenStatus::Dropped; self.origins.len()];
        for &k in &self.kept {
            st[k] = TokenStatus::Kept;
        }
        for &(_, c) in &self.merge_pairs {
            st[c] = TokenStatus::MergedCandidate;
        }
        for &(s, _) in &self.merge_pairs {
            st[s] = TokenStatus::MergedSource;
        }
        st
    }

    pub fn survivors(&self) -> usize {
        self.kept.len() + self.merge_pairs.len()
    }
}

fn features_for<F: Scalar>(
    record: &AttentionRecord<F>,
    feature: SimilarityFeature,
    rows: &[usize],
) -> Result<Tensor<F>> {
    let source = match feature {
        SimilarityFeature::K => record.keys.as_ref(),
        SimilarityFeature::Q => record.queries.as_ref(),
        SimilarityFeature::Attn => Some(&record.attn),
    };
    let source = source.ok_or_else(|| {
        Error::config(format!("layer {} did not retain the {feature:?} features needed for merging", record.layer))
    })?;
    source.gather_rows(rows)
}

/// Run one selection stage on `batch`: prune visual tokens by score, merge
/// part of the discarded ones, and rebuild the token sequence as
/// `(class, pose, kept visual in order, merged)`.
pub fn apply_selection<F: Scalar>(
    g: &mut Graph<F>,
    batch: TokenBatch,
    record: &AttentionRecord<F>,
    cfg: &SelectionConfig,
) -> Result<(TokenBatch, SelectionOutcome)> {
    cfg.validate()?;
    let layout = batch.layout;
    let vs = layout.visual_start();
    let scores = prune_scores(&record.attn, &batch, cfg)?;
    let (kept, discarded) = topk_prune(&scores, cfg.rho);

    let plan = if discarded.len() >= 2 && cfg.merge_policy != MergePolicy::None {
        let rows: Vec<usize> = discarded.iter().map(|&i| vs + i).collect();
        let feats = features_for(record, cfg.similarity_feature, &rows)?;
        match cfg.merge_policy {
            MergePolicy::Poguise => poguise_plan(&feats, cfg.lambda)?,
            MergePolicy::Bipartite => bipartite_plan(&feats, cfg.lambda)?,
            MergePolicy::None => unreachable!(),
        }
    } else {
        MergePlan::default()
    };
    // plan indices are into `discarded`; lift them to visual positions
    let merge_pairs: Vec<(usize, usize)> = plan.pairs.iter().map(|&(s, c)| (discarded[s], discarded[c])).collect();
    let mut used = vec![false; layout.visual];
    for &(s, c) in &merge_pairs {
        used[s] = true;
        used[c] = true;
    }
    let dropped: Vec<usize> = discarded.iter().copied().filter(|&i| !used[i]).collect();
    let outcome = SelectionOutcome {
        layer: record.layer,
        kept: kept.clone(),
        merge_pairs: merge_pairs.clone(),
        dropped,
        origins: batch.visual_origin.clone(),
    };

    if discarded.is_empty() {
        return Ok((batch, outcome));
    }

    let prefix: Vec<usize> = (0..vs).collect();
    let mut parts: Vec<Var> = vec![g.gather_rows(batch.tokens, &prefix)?];
    let kept_rows: Vec<usize> = kept.iter().map(|&i| vs + i).collect();
    parts.push(g.gather_rows(batch.tokens, &kept_rows)?);
    if !merge_pairs.is_empty() {
        let src: Vec<usize> = merge_pairs.iter().map(|&(s, _)| vs + s).collect();
        let cand: Vec<usize> = merge_pairs.iter().map(|&(_, c)| vs + c).collect();
        let a = g.gather_rows(batch.tokens, &src)?;
        let b = g.gather_rows(batch.tokens, &cand)?;
        let sum = g.add(a, b)?;
        parts.push(g.scale(sum, F::lit(0.5)));
    }
    let tokens = g.concat_rows(&parts)?;

    let mut visual_origin: Vec<VisualOrigin> = kept.iter().map(|&i| batch.visual_origin[i]).collect();
    visual_origin.extend(merge_pairs.iter().map(|&(s, _)| VisualOrigin { merged: true, ..batch.visual_origin[s] }));
    let mut alive_mask = vec![false; batch.alive_mask.len()];
    for o in &visual_origin {
        alive_mask[o.cube_index(batch.grid)] = true;
    }
    let new_batch = TokenBatch {
        tokens,
        layout: TokenLayout { pose: layout.pose, visual: visual_origin.len() },
        visual_origin,
        alive_mask,
        grid: batch.grid,
    };
    Ok((new_batch, outcome))
}

/// Per-stage CSV: `stage,t,row,col,status`, one line per visual token the
/// stage received.
pub fn selection_csv(outcomes: &[SelectionOutcome]) -> String {
    let mut out = String::from("stage,t,row,col,status\n");
    for o in outcomes {
        for (origin, st) in o.origins.iter().zip(o.statuses()) {
            let _ = writeln!(out, "{},{},{},{},{}", o.layer, origin.t, origin.row, origin.col, st.as_str());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn attn_batch(layout: TokenLayout, grid: (usize, usize, usize)) -> TokenBatch {
        let mut origins = Vec::new();
        for t in 0..grid.0 {
            for row in 0..grid.1 {
                for col in 0..grid.2 {
                    origins.push(VisualOrigin { t, row, col, merged: false });
                }
            }
        }
        origins.truncate(layout.visual);
        TokenBatch { tokens: dummy_var(), layout, alive_mask: vec![true; origins.len()], visual_origin: origins, grid }
    }

    fn dummy_var() -> Var {
        Graph::<f64>::new().constant(Tensor::zeros(&[1]))
    }

    #[test]
    fn class_pose_score_by_hand() {
        // one class, two pose, one visual token
        let layout = TokenLayout { pose: 2, visual: 1 };
        let mut a = Tensor::<f64>::zeros(&[4, 4]);
        a.row_mut(3).copy_from_slice(&[0.2, 0.1, 0.3, 0.4]);
        let b = attn_batch(layout, (1, 1, 1));
        let s = prune_scores(&a, &b, &SelectionConfig { kappa: 0.5, ..Default::default() }).unwrap();
        assert!((s[0] - 0.30).abs() < 1e-15);
    }

    #[test]
    fn class_pose_needs_pose_tokens() {
        let layout = TokenLayout { pose: 0, visual: 2 };
        let a = Tensor::<f64>::full(&[3, 3], 1.0 / 3.0);
        let b = attn_batch(layout, (1, 1, 2));
        assert!(matches!(prune_scores(&a, &b, &SelectionConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn midframe_sums_attention_to_middle_slice() {
        // grid t=2,h=1,w=2: mid slice t=1 holds visual tokens 2 and 3
        let layout = TokenLayout { pose: 0, visual: 4 };
        let a = Tensor::<f64>::from_fn(&[5, 5], |i| (i % 5) as f64);
        let b = attn_batch(layout, (2, 1, 2));
        let cfg = SelectionConfig { score_policy: ScorePolicy::MidFrame, ..Default::default() };
        let s = prune_scores(&a, &b, &cfg).unwrap();
        assert_eq!(s, vec![3.0 + 4.0; 4]);
    }

    #[test]
    fn topk_by_hand_and_boundaries() {
        let (k, d) = topk_prune(&[0.5, 0.1, 0.4, 0.2], 0.5);
        assert_eq!(k, vec![0, 2]);
        assert_eq!(d, vec![1, 3]);
        let (k, d) = topk_prune(&[0.5, 0.1, 0.4, 0.2], 1.0);
        assert_eq!(k, vec![0, 1, 2, 3]);
        assert!(d.is_empty());
        // ties go to the lower index
        let (k, _) = topk_prune(&[1.0, 1.0, 1.0], 0.34);
        assert_eq!(k, vec![0]);
        assert_eq!(keep_count(1568, 0.6), 941);
    }

    #[test]
    fn reference_schedule() {
        let cfg = SelectionConfig::default();
        assert_eq!(cfg.schedule(1568, 3), vec![1568, 1129, 813, 585]);
        let c = cfg.stage_counts(1568);
        assert_eq!((c.kept, c.merged), (941, 188));
    }

    #[test]
    fn merge_example_from_three_features() {
        let f = Tensor::from_rows(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let x = Tensor::from_rows(&[&[2.0, 4.0], &[4.0, 8.0], &[9.0, 9.0]]);
        let (plan, merged) = poguise_merge(&x, &f, 0.3).unwrap();
        assert_eq!(plan.pairs, vec![(0, 1)]);
        assert_eq!(merged.unwrap().data(), &[3.0, 6.0]);
    }

    #[test]
    fn merge_rate_one_makes_every_token_a_source() {
        let f = Tensor::from_fn(&[6, 3], |i| ((i * 7) % 5) as f64 + 0.5);
        let (plan, merged) = poguise_merge(&f, &f, 1.0).unwrap();
        assert_eq!(plan.pairs.len(), 6);
        assert_eq!(merged.unwrap().dims(), &[6, 3]);
    }

    #[test]
    fn identical_tokens_merge_to_their_value() {
        let x = Tensor::full(&[5, 4], 1.25);
        let (_, merged) = poguise_merge(&x, &x, 0.4).unwrap();
        assert!(merged.unwrap().data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn single_discarded_token_is_a_no_op() {
        let x = Tensor::full(&[1, 4], 1.0);
        let (plan, merged) = poguise_merge(&x, &x, 0.5).unwrap();
        assert!(plan.pairs.is_empty() && merged.is_none());
    }

    #[test]
    fn bipartite_limit_and_pair() {
        let x = Tensor::from_fn(&[8, 2], |i| i as f64);
        let err = bipartite_merge(&x, &x, 0.6).unwrap_err();
        assert!(err.to_string().contains("at most half"));
        let cfg = SelectionConfig { merge_policy: MergePolicy::Bipartite, lambda: 0.7, ..Default::default() };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let two = Tensor::from_rows(&[&[1.0, 2.0], &[1.0, 2.0]]);
        let (plan, merged) = bipartite_merge(&two, &two, 0.5).unwrap();
        assert_eq!(plan.pairs, vec![(0, 1)]);
        assert_eq!(merged.unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn statuses_and_csv() {
        let o = SelectionOutcome {
            layer: 3,
            kept: vec![0],
            merge_pairs: vec![(2, 1)],
            dropped: vec![3],
            origins: (0..4).map(|c| VisualOrigin { t: 0, row: 0, col: c, merged: false }).collect(),
        };
        let csv = selection_csv(&[o]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "stage,t,row,col,status");
        assert_eq!(lines[1], "3,0,0,0,kept");
        assert_eq!(lines[2], "3,0,0,1,merged-candidate");
        assert_eq!(lines[3], "3,0,0,2,merged-source");
        assert_eq!(lines[4], "3,0,0,3,dropped");
    }

    proptest! {
        #[test]
        fn positive_scaling_keeps_the_kept_set(scores in prop::collection::vec(0.0f64..1.0, 1..40), c in 0.01f64..100.0, rho in 0.05f64..1.0) {
            let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
            // ordering can only change between values that are equal after rounding
            let (a, _) = topk_prune(&scores, rho);
            let (b, _) = topk_prune(&scaled, rho);
            let ranks_equal = {
                let ra = rank_desc(&scores);
                let rb = rank_desc(&scaled);
                ra == rb
            };
            prop_assume!(ranks_equal);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn kept_sets_are_nested(scores in prop::collection::vec(0.0f64..1.0, 1..40), r1 in 0.05f64..1.0, r2 in 0.05f64..1.0) {
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let (a, _) = topk_prune(&scores, lo);
            let (b, _) = topk_prune(&scores, hi);
            prop_assert!(a.iter().all(|i| b.contains(i)));
        }

        #[test]
        fn merge_ignores_feature_scale(n in 2usize..20, seed in any::<u64>(), exp in -8i32..8, lambda in 0.05f64..1.0) {
            let f = Tensor::<f64>::from_fn(&[n, 5], |i| (((i as u64).wrapping_mul(2654435761) ^ seed) % 1000) as f64 / 500.0 - 1.0);
            let scaled = f.map(|v| v * 2f64.powi(exp));
            prop_assert_eq!(poguise_plan(&f, lambda).unwrap(), poguise_plan(&scaled, lambda).unwrap());
        }

        #[test]
        fn merged_rows_are_pair_means(n in 2usize..24, seed in any::<u64>(), lambda in 0.05f64..1.0) {
            let x = Tensor::<f64>::from_fn(&[n, 3], |i| ((i as u64 ^ seed) % 97) as f64 - 40.0);
            let (plan, merged) = poguise_merge(&x, &x, lambda).unwrap();
            let merged = merged.unwrap();
            for (k, &(s, c)) in plan.pairs.iter().enumerate() {
                prop_assert!(s != c);
                for j in 0..3 {
                    let mean = (x.row(s)[j] + x.row(c)[j]) / 2.0;
                    prop_assert!((merged.row(k)[j] - mean).abs() < 1e-12);
                }
            }
            prop_assert_eq!(plan.pairs.len(), merge_count(n, lambda, MergePolicy::Poguise));
        }
    }
}
