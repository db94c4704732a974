//! Width expansion that preserves the network function, and depth growth by
//! layer duplication.
//!
//! Maps are 0-based: `m[i]` is the source index copied into target index `i`.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::TokenSeq;
use crate::error::{Error, Result};
use crate::model::{forward, Direction, LayerParams, ModelConfig, Params};
use crate::parallel::par_map;
use crate::precision::{precision, round_slice};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    Flat,
    /// Whole blocks of this size are mapped together.
    HeadBlock(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapMode {
    /// Cyclic repetition; requires `d_tgt` to be a multiple of `d_src`.
    #[default]
    Exact,
    /// Extra indices drawn uniformly with replacement.
    Approx,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionMap {
    pub d_src: usize,
    pub d_tgt: usize,
    pub m: Vec<usize>,
    /// `multiplicity[j]` counts the target indices mapped to source index `j`.
    pub multiplicity: Vec<usize>,
    pub seed: u64,
    pub structure: Structure,
    pub mode: MapMode,
}

impl ExpansionMap {
    pub fn identity(d: usize) -> ExpansionMap {
        ExpansionMap {
            d_src: d,
            d_tgt: d,
            m: (0..d).collect(),
            multiplicity: vec![1; d],
            seed: 0,
            structure: Structure::Flat,
            mode: MapMode::Exact,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.d_src == self.d_tgt
    }
}

/// Builds the index map from `d_src` to `d_tgt` coordinates.
///
/// The first `d_src` entries are always the identity. In exact mode the rest
/// repeat `0..d_src` cyclically. In approx mode each is drawn with
/// [`SplitMix64::below`] from a generator seeded with `seed`.
pub fn build_mapping(
    d_src: usize,
    d_tgt: usize,
    seed: u64,
    structure: Structure,
    mode: MapMode,
) -> Result<ExpansionMap> {
    if d_src == 0 || d_tgt < d_src {
        return Err(Error::contract(format!(
            "cannot map {d_src} onto {d_tgt} coordinates"
        )));
    }
    let block = match structure {
        Structure::Flat => 1,
        Structure::HeadBlock(b) => {
            if b == 0 || d_src % b != 0 || d_tgt % b != 0 {
                return Err(Error::contract(format!(
                    "head-block map needs {d_src} and {d_tgt} to be multiples of {b}"
                )));
            }
            b
        }
    };
    let (ns, nt) = (d_src / block, d_tgt / block);
    let blocks: Vec<usize> = match mode {
        MapMode::Exact => {
            if nt % ns != 0 {
                return Err(Error::contract(format!(
                    "exact expansion needs {d_tgt} to be a multiple of {d_src}; use approx mode"
                )));
            }
            (0..nt).map(|i| i % ns).collect()
        }
        MapMode::Approx => {
            let mut g = SplitMix64::new(seed);
            (0..nt)
                .map(|i| if i < ns { i } else { g.below(ns) })
                .collect()
        }
    };
    let m: Vec<usize> = blocks
        .iter()
        .flat_map(|&b| (0..block).map(move |k| b * block + k))
        .collect();
    let mut multiplicity = vec![0; d_src];
    for &j in &m {
        multiplicity[j] += 1;
    }
    Ok(ExpansionMap {
        d_src,
        d_tgt,
        m,
        multiplicity,
        seed,
        structure,
        mode,
    })
}

/// Row stage: row `i` is `Q[m_in[i]] / M[m_in[i]]`. Copied values are not rounded.
pub fn expand_rows(q: &Tensor, m_in: &ExpansionMap) -> Result<Tensor> {
    let (r, c) = q.dims2();
    if r != m_in.d_src {
        return Err(Error::contract(format!(
            "matrix has {r} rows, map expects {}",
            m_in.d_src
        )));
    }
    let mut data = Vec::with_capacity(m_in.d_tgt * c);
    for &src in &m_in.m {
        let k = m_in.multiplicity[src];
        let start = data.len();
        data.extend_from_slice(q.row(src));
        if k > 1 {
            let scaled = &mut data[start..];
            scaled.iter_mut().for_each(|x| *x /= k as f64);
            round_slice(scaled, precision());
        }
    }
    Ok(Tensor::new(vec![m_in.d_tgt, c], data))
}

/// Column stage: column `j` is column `m_out[j]`.
pub fn expand_cols(q: &Tensor, m_out: &ExpansionMap) -> Result<Tensor> {
    let (r, c) = q.dims2();
    if c != m_out.d_src {
        return Err(Error::contract(format!(
            "matrix has {c} columns, map expects {}",
            m_out.d_src
        )));
    }
    let mut data = Vec::with_capacity(r * m_out.d_tgt);
    for i in 0..r {
        let row = q.row(i);
        data.extend(m_out.m.iter().map(|&j| row[j]));
    }
    Ok(Tensor::new(vec![r, m_out.d_tgt], data))
}

/// Averages along the input (row) dimension and copies along the output
/// (column) dimension.
pub fn expand_matrix(q: &Tensor, m_in: &ExpansionMap, m_out: &ExpansionMap) -> Result<Tensor> {
    expand_cols(&expand_rows(q, m_in)?, m_out)
}

/// Copies a vector along `map`.
pub fn expand_vector(v: &Tensor, map: &ExpansionMap) -> Result<Tensor> {
    if v.shape() != [map.d_src] {
        return Err(Error::contract(format!(
            "vector of shape {:?}, map expects {}",
            v.shape(),
            map.d_src
        )));
    }
    Ok(Tensor::computed(
        vec![map.d_tgt],
        map.m.iter().map(|&j| v.data()[j]).collect(),
    ))
}

/// The three maps used by [`expand_model`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelMaps {
    pub residual: ExpansionMap,
    pub attention: ExpansionMap,
    pub ffn: ExpansionMap,
}

impl ModelMaps {
    /// Writes one JSON object per map, tagged with its role.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            role: &'a str,
            #[serde(flatten)]
            map: &'a ExpansionMap,
        }
        let lines = [
            Line {
                role: "residual",
                map: &self.residual,
            },
            Line {
                role: "attention",
                map: &self.attention,
            },
            Line {
                role: "ffn",
                map: &self.ffn,
            },
        ];
        crate::data::write_jsonl(path, &lines)
    }
}

/// Widens `src` to `tgt` (same depth, vocabulary, context and head size).
///
/// One residual map is shared by every tensor touching the residual stream,
/// attention widths grow by whole heads, and the feed-forward width has its
/// own map. Layer-norm parameters and embeddings are copied; weight matrices
/// are averaged on their input side and copied on their output side.
pub fn expand_model(
    src: &Params,
    tgt: ModelConfig,
    seed: u64,
    mode: MapMode,
) -> Result<(Params, ModelMaps)> {
    let s = src.config;
    tgt.validate()?;
    if tgt.vocab_size != s.vocab_size || tgt.max_seq_len != s.max_seq_len {
        return Err(Error::contract(
            "expansion keeps vocabulary and context length",
        ));
    }
    if tgt.n_layers != s.n_layers {
        return Err(Error::contract(
            "expansion keeps depth; use stack_layers for depth",
        ));
    }
    if tgt.d_head != s.d_head {
        return Err(Error::contract("expansion keeps the head size"));
    }
    if tgt.d_model < s.d_model || tgt.n_heads < s.n_heads || tgt.d_ff < s.d_ff {
        return Err(Error::contract("expansion cannot shrink a model"));
    }
    let mut g = SplitMix64::new(seed);
    let maps = ModelMaps {
        residual: build_mapping(s.d_model, tgt.d_model, g.next_u64(), Structure::Flat, mode)?,
        attention: build_mapping(
            s.n_heads * s.d_head,
            tgt.n_heads * tgt.d_head,
            g.next_u64(),
            Structure::HeadBlock(s.d_head),
            mode,
        )?,
        ffn: build_mapping(s.d_ff, tgt.d_ff, g.next_u64(), Structure::Flat, mode)?,
    };
    let (r, a, f) = (&maps.residual, &maps.attention, &maps.ffn);
    let vocab = ExpansionMap::identity(s.vocab_size);
    let copy_rows = |t: &Tensor| expand_cols(t, r);
    let layers = src
        .layers
        .iter()
        .map(|l| -> Result<LayerParams> {
            Ok(LayerParams {
                ln1_gain: expand_vector(&l.ln1_gain, r)?,
                ln1_bias: expand_vector(&l.ln1_bias, r)?,
                wq: expand_matrix(&l.wq, r, a)?,
                wk: expand_matrix(&l.wk, r, a)?,
                wv: expand_matrix(&l.wv, r, a)?,
                wo: expand_matrix(&l.wo, a, r)?,
                ln2_gain: expand_vector(&l.ln2_gain, r)?,
                ln2_bias: expand_vector(&l.ln2_bias, r)?,
                ff_w1: expand_matrix(&l.ff_w1, r, f)?,
                ff_w2: expand_matrix(&l.ff_w2, f, r)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let params = Params {
        config: tgt,
        stage: src.stage,
        tok_emb: copy_rows(&src.tok_emb)?,
        pos_emb: copy_rows(&src.pos_emb)?,
        dir_emb: copy_rows(&src.dir_emb)?,
        layers,
        lnf_gain: expand_vector(&src.lnf_gain, r)?,
        lnf_bias: expand_vector(&src.lnf_bias, r)?,
        unembed: expand_matrix(&src.unembed, r, &vocab)?,
        reward_head: match &src.reward_head {
            Some(h) => Some(expand_matrix(h, r, &ExpansionMap::identity(1))?),
            None => None,
        },
    };
    Ok((params, maps))
}

/// Random token sequences of random length used as preservation probes.
pub fn probe_sequences(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<TokenSeq> {
    let mut g = SplitMix64::new(seed);
    (0..n)
        .map(|_| {
            let len = 1 + g.below(cfg.max_seq_len);
            TokenSeq::new((0..len).map(|_| g.below(cfg.vocab_size) as u16).collect())
                .expect("ids below vocab")
        })
        .collect()
}

/// Largest absolute logit difference between `src` and `tgt` over `n_probes`
/// random sequences, in both directions.
pub fn verify_preservation(src: &Params, tgt: &Params, n_probes: usize, seed: u64) -> Result<f64> {
    if src.config.vocab_size != tgt.config.vocab_size {
        return Err(Error::contract("models have different vocabularies"));
    }
    if src.config.n_layers != tgt.config.n_layers {
        return Err(Error::contract("models have different depths"));
    }
    let cfg = ModelConfig {
        max_seq_len: src.config.max_seq_len.min(tgt.config.max_seq_len),
        ..src.config
    };
    let probes = probe_sequences(&cfg, n_probes, seed);
    let diffs = par_map(&probes, |_, seq| -> Result<f64> {
        let mut worst = 0.0f64;
        for dir in Direction::BOTH {
            let a = forward(src, seq, dir)?;
            let b = forward(tgt, seq, dir)?;
            worst = worst.max(a.max_abs_diff(&b));
        }
        Ok(worst)
    });
    let mut worst = 0.0f64;
    for d in diffs {
        let d = d?;
        if d.is_nan() {
            return Ok(f64::NAN);
        }
        worst = worst.max(d);
    }
    Ok(worst)
}

/// Doubles the layer stack `times` times; layer `L + i` is a copy of layer `i`.
pub fn stack_layers(src: &Params, times: u32, max_layers: Option<usize>) -> Result<Params> {
    if times == 0 {
        return Err(Error::contract("stack_layers needs times >= 1"));
    }
    let depth = src
        .config
        .n_layers
        .checked_mul(1usize.checked_shl(times).unwrap_or(0))
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::contract("stacked depth overflows"))?;
    if let Some(max) = max_layers {
        if depth > max {
            return Err(Error::contract(format!(
                "stacked depth {depth} exceeds the maximum {max}"
            )));
        }
    }
    let mut p = src.clone();
    for _ in 0..times {
        let copy = p.layers.clone();
        p.layers.extend(copy);
    }
    p.config.n_layers = depth;
    Ok(p)
}

/// Whether the second half of the layer stack equals the first half bitwise.
pub fn halves_identical(p: &Params) -> bool {
    let n = p.layers.len();
    n % 2 == 0
        && p.layers[..n / 2]
            .iter()
            .zip(&p.layers[n / 2..])
            .all(|(a, b)| layer_bits_equal(a, b))
}

fn layer_bits_equal(a: &LayerParams, b: &LayerParams) -> bool {
    let bits = |l: &LayerParams| -> Vec<u64> {
        [
            &l.ln1_gain,
            &l.ln1_bias,
            &l.wq,
            &l.wk,
            &l.wv,
            &l.wo,
            &l.ln2_gain,
            &l.ln2_bias,
            &l.ff_w1,
            &l.ff_w2,
        ]
        .iter()
        .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
        .collect()
    };
    bits(a) == bits(b)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageReport {
    pub depth: usize,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub seconds: f64,
    /// For stacked stages: whether the freshly stacked halves were bitwise equal.
    pub duplicated_exactly: Option<bool>,
}

/// Trains a `target_layers / 2^k` layer model from scratch, then `k` times
/// doubles its depth and trains again. `train_fn(params, steps, stage)`
/// returns the trained parameters and their loss curve.
pub fn progressive_stack<F>(
    base: ModelConfig,
    target_layers: usize,
    k: u32,
    per_stage_steps: &[usize],
    seed: u64,
    mut train_fn: F,
) -> Result<(Params, Vec<StageReport>)>
where
    F: FnMut(Params, usize, usize) -> Result<(Params, Vec<f64>)>,
{
    let div = 1usize
        .checked_shl(k)
        .ok_or_else(|| Error::contract("k is too large"))?;
    if target_layers == 0 || target_layers % div != 0 {
        return Err(Error::contract(format!(
            "target depth {target_layers} is not divisible by 2^{k}"
        )));
    }
    if per_stage_steps.len() != k as usize + 1 {
        return Err(Error::contract(format!(
            "need {} per-stage step counts, got {}",
            k + 1,
            per_stage_steps.len()
        )));
    }
    let cfg = ModelConfig {
        n_layers: target_layers / div,
        ..base
    };
    let mut params = Params::init(cfg, seed)?;
    let mut reports = Vec::with_capacity(per_stage_steps.len());
    for (stage, &steps) in per_stage_steps.iter().enumerate() {
        let mut duplicated_exactly = None;
        if stage > 0 {
            params = stack_layers(&params, 1, Some(target_layers))?;
            duplicated_exactly = Some(halves_identical(&params));
        }
        let depth = params.config.n_layers;
        let started = Instant::now();
        let (trained, losses) = train_fn(params, steps, stage)?;
        let seconds = started.elapsed().as_secs_f64();
        log::info!("stage {stage}: {depth} layers, {steps} steps, {seconds:.2}s");
        params = trained;
        reports.push(StageReport {
            depth,
            steps,
            losses,
            seconds,
            duplicated_exactly,
        });
    }
    Ok((params, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precision::{with_precision, Precision};
    use proptest::prelude::*;

    fn random_model(cfg: ModelConfig, seed: u64) -> Params {
        Params::init_with_std(cfg, seed, 0.3).unwrap()
    }

    #[test]
    fn identity_and_cyclic_maps() {
        let id = build_mapping(4, 4, 9, Structure::Flat, MapMode::Approx).unwrap();
        assert_eq!(id.m, vec![0, 1, 2, 3]);
        assert_eq!(id.multiplicity, vec![1; 4]);
        let two = build_mapping(2, 4, 0, Structure::Flat, MapMode::Exact).unwrap();
        assert_eq!(two.m, vec![0, 1, 0, 1]);
        assert_eq!(two.multiplicity, vec![2, 2]);
        let heads = build_mapping(4, 8, 0, Structure::HeadBlock(2), MapMode::Exact).unwrap();
        assert_eq!(heads.m, vec![0, 1, 2, 3, 0, 1, 2, 3]);
    }

    #[test]
    fn mapping_errors() {
        assert!(build_mapping(4, 3, 0, Structure::Flat, MapMode::Approx).is_err());
        assert!(build_mapping(4, 6, 0, Structure::Flat, MapMode::Exact).is_err());
        assert!(build_mapping(4, 6, 0, Structure::HeadBlock(4), MapMode::Approx).is_err());
        assert!(build_mapping(0, 0, 0, Structure::Flat, MapMode::Exact).is_err());
    }

    #[test]
    fn approx_map_matches_splitmix_draws() {
        let m = build_mapping(3, 7, 42, Structure::Flat, MapMode::Approx).unwrap();
        let mut g = SplitMix64::new(42);
        let want: Vec<usize> = (0..7).map(|i| if i < 3 { i } else { g.below(3) }).collect();
        assert_eq!(m.m, want);
    }

    #[test]
    fn hand_case() {
        let q = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let map = build_mapping(2, 4, 0, Structure::Flat, MapMode::Exact).unwrap();
        let v = expand_matrix(&q, &map, &map).unwrap();
        let want = Tensor::from_rows(&[
            vec![0.5, 1.0, 0.5, 1.0],
            vec![1.5, 2.0, 1.5, 2.0],
            vec![0.5, 1.0, 0.5, 1.0],
            vec![1.5, 2.0, 1.5, 2.0],
        ]);
        assert_eq!(v, want);
    }

    #[test]
    fn identity_expansion_is_bitwise() {
        let q = Tensor::from_rows(&[vec![0.1, -0.7, 3.3], vec![1e-9, 2.0, -4.5]]);
        let (a, b) = (ExpansionMap::identity(2), ExpansionMap::identity(3));
        assert_eq!(expand_matrix(&q, &a, &b).unwrap(), q);
        assert!(expand_matrix(&q, &b, &b).is_err());
    }

    proptest! {
        #[test]
        fn row_stage_sums_back_to_source(
            d_src in 1usize..6,
            extra in 0usize..8,
            cols in 1usize..4,
            seed in any::<u64>(),
            vals in proptest::collection::vec(-10.0f64..10.0, 30),
        ) {
            let map = build_mapping(d_src, d_src + extra, seed, Structure::Flat, MapMode::Approx).unwrap();
            prop_assert_eq!(map.multiplicity.iter().sum::<usize>(), d_src + extra);
            prop_assert!(map.multiplicity.iter().all(|&k| k >= 1));
            prop_assert_eq!(&map.m[..d_src], &(0..d_src).collect::<Vec<_>>()[..]);
            let q = Tensor::new(vec![d_src, cols], vals[..d_src * cols].to_vec());
            let mid = with_precision(Precision::F64, || expand_rows(&q, &map).unwrap());
            let mut sums = vec![0.0; d_src * cols];
            for (i, &src) in map.m.iter().enumerate() {
                for c in 0..cols {
                    sums[src * cols + c] += mid.get2(i, c);
                }
            }
            for (s, x) in sums.iter().zip(q.data()) {
                prop_assert!((s - x).abs() <= 1e-12 * x.abs().max(1.0));
            }
        }

        #[test]
        fn mapping_is_pure(d_src in 1usize..8, extra in 0usize..8, seed in any::<u64>()) {
            let a = build_mapping(d_src, d_src + extra, seed, Structure::Flat, MapMode::Approx).unwrap();
            let b = build_mapping(d_src, d_src + extra, seed, Structure::Flat, MapMode::Approx).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn same_config_expansion_is_bitwise_identity() {
        let cfg = ModelConfig::new(16, 2, 32, 2, 12);
        let p = random_model(cfg, 1);
        let (q, _) = expand_model(&p, cfg, 7, MapMode::Exact).unwrap();
        assert_eq!(p, q);
        assert_eq!(verify_preservation(&p, &q, 5, 1).unwrap(), 0.0);
    }

    #[test]
    fn exact_doubling_preserves_logits() {
        with_precision(Precision::F64, || {
            let src_cfg = ModelConfig::new(16, 2, 32, 2, 12);
            let p = random_model(src_cfg, 3).to_reward_model().unwrap();
            let tgt_cfg = ModelConfig::new(32, 4, 64, 2, 12);
            let (q, maps) = expand_model(&p, tgt_cfg, 5, MapMode::Exact).unwrap();
            assert_eq!(q.config, tgt_cfg);
            assert_eq!(maps.attention.structure, Structure::HeadBlock(8));
            let drift = verify_preservation(&p, &q, 20, 9).unwrap();
            assert!(drift <= 1e-5, "drift {drift}");
        });
    }

    #[test]
    fn approx_expansion_reports_finite_drift() {
        let p = random_model(ModelConfig::new(16, 2, 32, 1, 12), 3);
        assert!(expand_model(&p, ModelConfig::new(24, 3, 48, 1, 12), 5, MapMode::Exact).is_err());
        let (q, _) =
            expand_model(&p, ModelConfig::new(24, 3, 48, 1, 12), 5, MapMode::Approx).unwrap();
        let drift = verify_preservation(&p, &q, 10, 1).unwrap();
        assert!(drift.is_finite());
    }

    #[test]
    fn verifier_detects_perturbation() {
        let p = random_model(ModelConfig::new(16, 2, 32, 1, 12), 3);
        let mut q = p.clone();
        q.unembed.data_mut()[5] += 1.0;
        assert!(verify_preservation(&p, &q, 10, 1).unwrap() > 0.0);
        let other = random_model(ModelConfig::new(16, 2, 32, 2, 12), 3);
        assert!(verify_preservation(&p, &other, 10, 1).is_err());
    }

    #[test]
    fn expansion_rejects_shape_changes() {
        let p = random_model(ModelConfig::new(16, 2, 32, 1, 12), 3);
        assert!(expand_model(&p, ModelConfig::new(32, 4, 64, 2, 12), 0, MapMode::Exact).is_err());
        assert!(expand_model(&p, ModelConfig::new(32, 4, 64, 1, 16), 0, MapMode::Exact).is_err());
        assert!(expand_model(&p, ModelConfig::new(8, 1, 16, 1, 12), 0, MapMode::Exact).is_err());
    }

    #[test]
    fn stacking_duplicates_layers() {
        let p = random_model(ModelConfig::new(16, 2, 32, 2, 12), 3);
        let s = stack_layers(&p, 1, None).unwrap();
        assert_eq!(s.config.n_layers, 4);
        assert_eq!(s.layers[2], p.layers[0]);
        assert_eq!(s.layers[3], p.layers[1]);
        assert!(halves_identical(&s));
        assert_eq!(s.tok_emb, p.tok_emb);
        assert_eq!(s.unembed, p.unembed);

        let one = random_model(ModelConfig::new(16, 2, 32, 1, 12), 3);
        let four = stack_layers(&one, 2, None).unwrap();
        assert!(four.layers.iter().all(|l| *l == one.layers[0]));
        assert!(stack_layers(&one, 0, None).is_err());
        assert!(stack_layers(&one, 3, Some(4)).is_err());
    }

    #[test]
    fn progressive_stack_stage_depths() {
        let base = ModelConfig::new(8, 2, 16, 8, 8);
        let (p, reports) =
            progressive_stack(base, 8, 2, &[0, 0, 0], 1, |p, _, _| Ok((p, vec![]))).unwrap();
        let depths: Vec<usize> = reports.iter().map(|r| r.depth).collect();
        assert_eq!(depths, vec![2, 4, 8]);
        assert_eq!(p.config.n_layers, 8);
        assert_eq!(reports[0].duplicated_exactly, None);
        assert!(reports[1..]
            .iter()
            .all(|r| r.duplicated_exactly == Some(true)));

        let (_, plain) = progressive_stack(base, 8, 0, &[0], 1, |p, _, _| Ok((p, vec![]))).unwrap();
        assert_eq!(plain[0].depth, 8);
        assert!(progressive_stack(base, 6, 2, &[0, 0, 0], 1, |p, _, _| Ok((p, vec![]))).is_err());
        assert!(progressive_stack(base, 8, 2, &[0, 0], 1, |p, _, _| Ok((p, vec![]))).is_err());
    }

    #[test]
    fn maps_export_as_jsonl() {
        let p = random_model(ModelConfig::new(16, 2, 32, 1, 12), 3);
        let (_, maps) =
            expand_model(&p, ModelConfig::new(32, 4, 64, 1, 12), 5, MapMode::Exact).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("maps.jsonl");
        maps.write_jsonl(&path).unwrap();
        let lines = crate::data::read_lines(&path).unwrap();
        assert_eq!(lines.len(), 3);
        let v: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
        assert_eq!(v["role"], "attention");
        assert_eq!(v["d_tgt"], 32);
    }
}
