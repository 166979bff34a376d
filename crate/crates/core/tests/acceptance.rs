//! Acceptance criteria, one PASS/FAIL line each. Oracles here are written
//! independently of the library code they check. Exits non-zero when any
//! criterion fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use lipger::asr::{ctc_prefix_beam_nbest, exhaustive_nbest, EmissionLattice, Hypothesis, HypothesisList};
use lipger::audio::{convolve_ir, measure_power, mix_at_snr, AudioClip, CorruptionSpec, ImpulseResponse, Provenance};
use lipger::corpus::{render_instruction, CorpusBuilder, Split};
use lipger::eval::{wer_counts, System};
use lipger::lip::{LipEncoderConfig, LipFeature, RoiFormat};
use lipger::lm::{
    adapter_forward, base_forward, decays, generate, init_adapter, init_base, is_trainable, loss_graph, ModelConfig,
    TokenizedSample,
};
use lipger::pipeline::{Pipeline, PipelineConfig};
use lipger::tensor::{no_grad, Binder, Graph, ParamSet, Tensor};
use lipger::train::{evaluate_loss, train, Partition, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

fn random_lattice(rng: &mut ChaCha8Rng) -> EmissionLattice {
    let frames = rng.gen_range(1..=5);
    let vocab = rng.gen_range(1..=3);
    let words = (0..vocab).map(|i| ["x", "y", "z"][i].to_string()).collect();
    let rows = (0..frames)
        .map(|_| {
            let p: Vec<f64> = (0..=vocab).map(|_| rng.gen_range(0.01..1.0)).collect();
            let z: f64 = p.iter().sum();
            p.iter().map(|v| (v / z).ln()).collect()
        })
        .collect();
    EmissionLattice::new(words, rows).unwrap()
}

/// Sums path probabilities per collapsed sequence by visiting every path.
fn enumerate_paths(lat: &EmissionLattice) -> Vec<(Vec<usize>, f64)> {
    let v = lat.vocab.len() + 1;
    let blank = v - 1;
    let f = lat.frames.len();
    let mut totals: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    for code in 0..v.pow(f as u32) {
        let mut c = code;
        let mut path = Vec::with_capacity(f);
        let mut p = 1.0;
        for t in 0..f {
            let s = c % v;
            c /= v;
            p *= lat.frames[t][s].exp();
            path.push(s);
        }
        let mut seq: Vec<usize> = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != blank {
                seq.push(s);
            }
            prev = Some(s);
        }
        *totals.entry(seq).or_insert(0.0) += p;
    }
    let mut out: Vec<(Vec<usize>, f64)> = totals.into_iter().map(|(s, p)| (s, p.ln())).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-12)
}

fn c1_beam_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut bad = Vec::new();
    for case in 0..200 {
        let lat = random_lattice(&mut rng);
        let paths = (lat.vocab.len() + 1).pow(lat.frames.len() as u32);
        let n = rng.gen_range(2..=5);
        let beam = ctc_prefix_beam_nbest(&lat, paths.max(n), n).map_err(err)?;
        let exact = exhaustive_nbest(&lat, n).map_err(err)?;
        let brute = enumerate_paths(&lat);
        let same_as_exhaustive = beam.hypotheses.len() == exact.hypotheses.len()
            && beam
                .hypotheses
                .iter()
                .zip(&exact.hypotheses)
                .all(|(a, b)| a.tokens == b.tokens && close(a.score, b.score));
        let same_as_brute = beam.hypotheses.len() == brute.len().min(n)
            && beam
                .hypotheses
                .iter()
                .zip(&brute)
                .all(|(a, (seq, s))| a.tokens == lat.words(seq) && close(a.score, *s));
        if !(same_as_exhaustive && same_as_brute) {
            bad.push(case);
        }
    }
    ensure(bad.is_empty(), format!("200 lattices, mismatching cases {bad:?}"))
}

// ---------------------------------------------------------------- 2

/// Textbook edit-distance recursion over prefix lengths. Column `j` of the
/// memo depends only on `h[..j]`, so a depth-first walk over hypotheses
/// keeps every column left of the one it just changed.
struct EditOracle<'a> {
    r: &'a [u8],
    h: Vec<u8>,
    memo: Vec<Vec<Option<usize>>>,
}

impl EditOracle<'_> {
    fn d(&mut self, i: usize, j: usize) -> usize {
        if let Some(v) = self.memo[j][i] {
            return v;
        }
        let v = if i == 0 {
            j
        } else if j == 0 {
            i
        } else {
            let sub = self.d(i - 1, j - 1) + usize::from(self.r[i - 1] != self.h[j - 1]);
            let del = self.d(i - 1, j) + 1;
            let ins = self.d(i, j - 1) + 1;
            sub.min(del).min(ins)
        };
        self.memo[j][i] = Some(v);
        v
    }
}

const WORDS: [&str; 4] = ["one", "two", "three", "four"];

fn sweep_hyps(o: &mut EditOracle<'_>, hw: &mut Vec<&'static str>, rw: &[&str], max: usize, bad: &mut usize, n: &mut usize) {
    let j = o.h.len();
    o.memo[j].iter_mut().for_each(|m| *m = None);
    let want = o.d(o.r.len(), j);
    let c = wer_counts(rw, hw).expect("non-empty reference");
    let hits = c.ref_words - c.substitutions - c.deletions;
    *n += 1;
    if c.errors() != want || hits + c.substitutions + c.insertions != j {
        *bad += 1;
    }
    if j == max {
        return;
    }
    for w in 0..WORDS.len() as u8 {
        o.h.push(w);
        hw.push(WORDS[w as usize]);
        sweep_hyps(o, hw, rw, max, bad, n);
        o.h.pop();
        hw.pop();
    }
}

fn c2_wer_oracle() -> Check {
    const MAX: usize = 6;
    let mut refs: Vec<Vec<u8>> = vec![vec![]];
    let mut frontier = refs.clone();
    for _ in 0..MAX {
        frontier = frontier
            .iter()
            .flat_map(|s| (0..4u8).map(move |w| [s.as_slice(), &[w]].concat()))
            .collect();
        refs.extend(frontier.iter().cloned());
    }
    let (mut bad, mut n) = (0, 0);
    for r in refs.iter().filter(|r| !r.is_empty()) {
        let rw: Vec<&str> = r.iter().map(|&w| WORDS[w as usize]).collect();
        let mut o = EditOracle {
            r,
            h: Vec::new(),
            memo: vec![vec![None; r.len() + 1]; MAX + 1],
        };
        sweep_hyps(&mut o, &mut Vec::new(), &rw, MAX, &mut bad, &mut n);
    }
    let w = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    let worked = wer_counts(&w("you are very kind"), &w("you a very kind day")).map_err(err)?.wer();
    ensure(
        bad == 0 && worked == 0.5,
        format!("{n} pairs, {bad} mismatches; worked example WER {worked}"),
    )
}

// ---------------------------------------------------------------- 3

fn c3_snr() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.gen_range(200..2000);
        let m = rng.gen_range(50..3000);
        let sig: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let noise: Vec<f64> = (0..m).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let snr = rng.gen_range(0.0..=40.0);
        let s = AudioClip::new(sig.clone(), 16_000).map_err(err)?;
        let (mixed, _) = mix_at_snr(&s, &AudioClip::new(noise, 16_000).map_err(err)?, snr).map_err(err)?;
        let ps = sig.iter().map(|x| x * x).sum::<f64>() / n as f64;
        let pn = mixed.samples().iter().zip(&sig).map(|(y, x)| (y - x) * (y - x)).sum::<f64>() / n as f64;
        worst = worst.max((10.0 * (ps / pn).log10() - snr).abs());
    }
    let x: Vec<f64> = (0..500).map(|_| rng.gen_range(-0.9..0.9)).collect();
    let clip = AudioClip::new(x.clone(), 16_000).map_err(err)?;
    let y = convolve_ir(&clip, &ImpulseResponse::new(vec![1.0], 16_000).map_err(err)?).map_err(err)?;
    let delta_err = y.samples().iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let _ = measure_power(&clip);
    ensure(
        worst < 0.01 && delta_err <= 1e-12 && y.len() == x.len(),
        format!("worst SNR error {worst:.2e} dB over 100 mixes; unit-delta reverb error {delta_err:.1e}"),
    )
}

// ---------------------------------------------------------------- 4, 5

fn shape_config(c: usize, v: usize, k: usize) -> ModelConfig {
    ModelConfig {
        dim: c,
        layers: 2,
        heads: 2,
        ff_mult: 2,
        max_len: 64,
        prefix_len: k,
        prompt_layers: 1,
        lip: LipEncoderConfig {
            roi_size: 8,
            stem_channels: 2,
            blocks: 1,
            tcn_levels: 1,
            lip_dim: 6,
            lip_len: v,
            ..Default::default()
        },
    }
}

fn c4_shapes() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = 15;
    let mut cases = Vec::new();
    for t in 0..12u64 {
        let (v, c, i) = (rng.gen_range(1..=24), 2 * rng.gen_range(2..=20), rng.gen_range(1..=30));
        let cfg = shape_config(c, v, k);
        let mut p = init_base(&cfg, 20, t).map_err(err)?;
        p.extend(init_adapter(&cfg, t + 100).map_err(err)?);
        let e = LipFeature::new(Tensor::new(v, 6, (0..v * 6).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .map_err(err)?;
        let ids: Vec<usize> = (0..i).map(|_| rng.gen_range(0..20)).collect();
        let (logits, shapes) = adapter_forward(&ids, &e, &p, &cfg).map_err(err)?;
        let ok = logits.shape() == (i, 20)
            && shapes.len() == cfg.layers
            && shapes
                .iter()
                .all(|s| s.prompt_input == (k + v, c) && s.prompt_slice == (k, c) && s.attended == (k + i, c));
        if !ok {
            return Err(format!("K={k} V={v} C={c} I={i}: {shapes:?}"));
        }
        cases.push((v, c, i));
    }
    Ok(format!("K=15 with (V, C, I) in {cases:?}"))
}

fn c5_zero_gate() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for t in 0..8u64 {
        let cfg = shape_config(2 * rng.gen_range(2..=16), rng.gen_range(1..=10), rng.gen_range(1..=15));
        let mut p = init_base(&cfg, 30, t).map_err(err)?;
        p.extend(init_adapter(&cfg, t + 7).map_err(err)?);
        let v = cfg.lip.lip_len;
        let e = LipFeature::new(Tensor::new(v, 6, (0..v * 6).map(|_| rng.gen_range(-2.0..2.0)).collect()))
            .map_err(err)?;
        let ids: Vec<usize> = (0..rng.gen_range(1..40)).map(|_| rng.gen_range(0..30)).collect();
        let a = adapter_forward(&ids, &e, &p, &cfg).map_err(err)?.0;
        let b = base_forward(&ids, &p, &cfg).map_err(err)?;
        worst = worst.max(a.max_abs_diff(&b));
    }
    ensure(worst == 0.0, format!("max |adapter - base| logit difference {worst:e} over 8 models"))
}

// ---------------------------------------------------------------- 6

fn c6_gradients() -> Check {
    let cfg = ModelConfig {
        dim: 16,
        layers: 2,
        heads: 2,
        ff_mult: 2,
        max_len: 16,
        prefix_len: 4,
        prompt_layers: 1,
        lip: LipEncoderConfig {
            roi_size: 8,
            stem_channels: 4,
            blocks: 1,
            tcn_levels: 1,
            lip_dim: 8,
            lip_len: 6,
            ..Default::default()
        },
    };
    let mut p = init_base(&cfg, 10, 61).map_err(err)?;
    p.extend(init_adapter(&cfg, 62).map_err(err)?);
    for l in 0..cfg.layers {
        p.insert(format!("adapter.layer{l}.gate"), Tensor::scalar(0.4 + 0.3 * l as f64));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rois = lipger::lip::PreparedRois {
        frames: 5,
        height: 8,
        width: 8,
        pixels: (0..5 * 64).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    };
    let sample = TokenizedSample {
        inputs: vec![1, 5, 6, 7, 8, 9],
        targets: vec![5, 6, 7, 8, 9, 2],
        mask: vec![false, false, false, true, true, true],
    };
    let loss_of = |q: &ParamSet| {
        let mut g = Graph::new();
        let mut b = Binder::new(q, &no_grad);
        let l = loss_graph(&mut g, &mut b, &cfg, &sample, Some(&rois), 3.0).unwrap();
        g.value(l).item()
    };
    let mut g = Graph::new();
    let mut b = Binder::new(&p, &is_trainable);
    let l = loss_graph(&mut g, &mut b, &cfg, &sample, Some(&rois), 3.0).map_err(err)?;
    let mut grads = g.backward(l);
    let analytic = b.collect(&mut grads);
    let trainable: Vec<String> = p.names().filter(|n| is_trainable(n)).cloned().collect();
    if analytic.len() != trainable.len() {
        return Err(format!("{} of {} trainable tensors received gradients", analytic.len(), trainable.len()));
    }
    let eps = 1e-5;
    let mut work = p.clone();
    let mut worst = (String::new(), 0.0f64);
    for name in &trainable {
        let a = &analytic[name];
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for i in 0..a.len() {
            let orig = work.expect(name).data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = loss_of(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = loss_of(&work);
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let num = (up - down) / (2.0 * eps);
            diff += (a.data()[i] - num).powi(2);
            na += a.data()[i].powi(2);
            nn += num * num;
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-8);
        if rel > worst.1 {
            worst = (name.clone(), rel);
        }
    }
    ensure(
        worst.1 < 1e-4,
        format!("{} tensors; worst relative error {:.2e} ({})", trainable.len(), worst.1, worst.0),
    )
}

// ---------------------------------------------------------------- pipeline runs

fn run_pipeline(root: &Path, seed: u64) -> Result<Pipeline, String> {
    let cfg = PipelineConfig {
        seed,
        ..PipelineConfig::default()
    };
    let p = Pipeline::new(cfg, root).map_err(err)?;
    p.run_all().map_err(err)?;
    Ok(p)
}

struct Runs {
    _dirs: Vec<tempfile::TempDir>,
    seed0: Option<(PathBuf, Pipeline)>,
}

impl Runs {
    fn seed0(&mut self) -> Result<&Pipeline, String> {
        if self.seed0.is_none() {
            let d = tempfile::tempdir().map_err(err)?;
            let p = run_pipeline(d.path(), 0)?;
            self.seed0 = Some((d.path().to_path_buf(), p));
            self._dirs.push(d);
        }
        Ok(&self.seed0.as_ref().unwrap().1)
    }
}

// ---------------------------------------------------------------- 7

fn c7_frozen(runs: &mut Runs) -> Check {
    let p = runs.seed0()?;
    let tok = p.load_tokenizer().map_err(err)?;
    let records = p.load_records(Split::Train).map_err(err)?;
    let examples = p.examples(&records[..64], &tok, true).map_err(err)?;
    let mut params = p.load_base(&tok).map_err(err)?;
    params.extend(init_adapter(&p.config().model, 77).map_err(err)?);
    let before = params.clone();
    let cfg = TrainConfig {
        max_steps: Some(10),
        epochs: 10,
        ..TrainConfig::default()
    };
    let part = Partition {
        trainable: &is_trainable,
        decays: &decays,
    };
    let log = train(&examples, &mut params, &part, &p.config().model, &cfg, None, |_| {}).map_err(err)?;
    let mut moved_frozen = Vec::new();
    let mut still = Vec::new();
    for (name, t) in params.iter() {
        let same = t.data() == before.expect(name).data();
        if name.starts_with("lm.") && !same {
            moved_frozen.push(name.clone());
        }
        if !name.starts_with("lm.") && same {
            still.push(name.clone());
        }
    }
    let frozen = params.names().filter(|n| n.starts_with("lm.")).count();
    ensure(
        log.steps.len() == 10 && moved_frozen.is_empty() && still.is_empty(),
        format!(
            "{} steps; {frozen} frozen tensors, changed: {moved_frozen:?}; {} trainable tensors, unchanged: {still:?}",
            log.steps.len(),
            params.len() - frozen
        ),
    )
}

// ---------------------------------------------------------------- 8

fn c8_overfit(runs: &mut Runs) -> Check {
    let p = runs.seed0()?;
    let tok = p.load_tokenizer().map_err(err)?;
    let records = p.load_records(Split::Train).map_err(err)?;
    let fixture = &records[..32];
    let examples = p.examples(fixture, &tok, true).map_err(err)?;
    let model = &p.config().model;
    let mut params = p.load_base(&tok).map_err(err)?;
    params.extend(init_adapter(model, 88).map_err(err)?);
    let initial = evaluate_loss(&params, model, &examples).map_err(err)?;
    let cfg = TrainConfig {
        epochs: 200,
        max_steps: Some(200),
        ..TrainConfig::default()
    };
    let part = Partition {
        trainable: &is_trainable,
        decays: &decays,
    };
    let t = Instant::now();
    let log = train(&examples, &mut params, &part, model, &cfg, None, |_| {}).map_err(err)?;
    let secs = t.elapsed().as_secs_f64();
    let ce = evaluate_loss(&params, model, &examples).map_err(err)?;
    let mut exact = 0;
    for r in fixture {
        let s = render_instruction(r).map_err(err)?;
        let e = lipger::lip::encode_prepared(&p.load_rois(r).map_err(err)?, &params, &model.lip).map_err(err)?;
        let out = generate(&tok.encode_prompt(&s.prompt), Some(&e), &params, model, 12).map_err(err)?;
        exact += usize::from(tok.detokenize(&out) == s.response);
    }
    ensure(
        ce < 0.1 && exact * 10 >= 9 * fixture.len() && log.steps.len() <= 200 && secs < 300.0,
        format!(
            "{} SGD steps (lr 5e-3, wd 0.02, batch 32) in {secs:.0}s: CE {initial:.4} -> {ce:.4}, exact match {exact}/32",
            log.steps.len()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn c9_visual(runs: &mut Runs) -> Check {
    let mut lines = Vec::new();
    let mut ok = true;
    for seed in 0..3u64 {
        let d;
        let p = if seed == 0 {
            runs.seed0()?
        } else {
            d = tempfile::tempdir().map_err(err)?;
            let p = run_pipeline(d.path(), seed)?;
            runs._dirs.push(d);
            // keep the pipeline alive only for this iteration
            &*Box::leak(Box::new(p))
        };
        let rep = p.load_report().map_err(err)?;
        let w = |s| rep.wer(s).unwrap_or(f64::NAN);
        let (one, ger, lip) = (w(System::OneBest), w(System::Ger), w(System::LipGer));
        ok &= lip < ger && ger < one;
        let recoverable = rep
            .systems
            .iter()
            .find(|s| s.system == System::OneBest)
            .map(|s| s.records.iter().filter(|r| r.counts.substitutions > 0).count())
            .unwrap_or(0);
        lines.push(format!(
            "seed {seed}: onebest {:.2}% ger {:.2}% lipger {:.2}% ({} records with a wrong 1-best)",
            100.0 * one,
            100.0 * ger,
            100.0 * lip,
            recoverable
        ));
    }
    ensure(ok, lines.join("; "))
}

// ---------------------------------------------------------------- 10

fn c10_template() -> Check {
    let golden = include_str!("../../../fixtures/golden_instruction.txt");
    let dir = tempfile::tempdir().map_err(err)?;
    for f in ["a.wav", "r.roi"] {
        std::fs::write(dir.path().join(f), b"").map_err(err)?;
    }
    let hyp = |t: &str, rank| Hypothesis {
        tokens: t.split(' ').map(str::to_string).collect(),
        score: -(rank as f64),
        rank,
    };
    let hyps = HypothesisList {
        hypotheses: vec![
            hyp("you a very kind day", 0),
            hyp("you are very kind day", 1),
            hyp("you have very kind day", 2),
        ],
        exhausted: false,
    };
    let spec = CorruptionSpec::clean(0);
    let prov = Provenance {
        spec,
        clean_power: 0.1,
        ir_gain: 1.0,
        interferer_offset: 0,
        interferer_scale: 0.0,
        noise_offset: 0,
        noise_scale: 0.0,
        measured_snr_db: None,
        output_gain: 1.0,
    };
    let words: Vec<String> = "you are very kind".split(' ').map(str::to_string).collect();
    let rec = CorpusBuilder::new(Some(dir.path().to_path_buf()))
        .build_record(&words, hyps, "a.wav".into(), "r.roi".into(), RoiFormat::Raw, prov, Split::Train)
        .map_err(err)?;
    let s = render_instruction(&rec).map_err(err)?;
    let phrase = "Please try to revise it using the words that are only included in the other-hypothesis";
    ensure(
        s.full_text() == golden && s.prompt.contains(phrase),
        format!("rendered {} bytes against a {}-byte golden file", s.full_text().len(), golden.len()),
    )
}

// ---------------------------------------------------------------- 11

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn c11_determinism(runs: &mut Runs) -> Check {
    runs.seed0()?;
    let first = runs.seed0.as_ref().unwrap().0.clone();
    let d = tempfile::tempdir().map_err(err)?;
    run_pipeline(d.path(), 0)?;
    let (a, b) = (files_under(&first), files_under(d.path()));
    // training logs carry wall-clock seconds and are not artifacts
    let is_log = |p: &PathBuf| p.to_string_lossy().ends_with("_log.csv");
    let keys: Vec<&PathBuf> = a.keys().filter(|p| !is_log(p)).collect();
    let differing: Vec<String> = keys
        .iter()
        .filter(|k| a.get(**k) != b.get(**k))
        .map(|k| k.display().to_string())
        .collect();
    let same_set = a.keys().eq(b.keys());
    ensure(
        same_set && differing.is_empty(),
        format!("{} artifacts compared byte for byte; differing: {differing:?}", keys.len()),
    )
}

// ----------------------------------------------------------------

fn main() {
    let mut runs = Runs {
        _dirs: Vec::new(),
        seed0: None,
    };
    let mut failed = 0;
    let mut report = |n: usize, name: &str, limit: Option<f64>, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let r = f();
        let secs = t.elapsed().as_secs_f64();
        let over = limit.is_some_and(|l| secs > l);
        let (pass, detail) = match r {
            Ok(d) if !over => (true, d),
            Ok(d) => (false, format!("{d}; took {secs:.1}s, limit {}s", limit.unwrap())),
            Err(d) => (false, d),
        };
        failed += usize::from(!pass);
        println!("{} {n:>2} {name} ({secs:.1}s): {detail}", if pass { "PASS" } else { "FAIL" });
    };
    report(1, "beam search matches exhaustive n-best", Some(10.0), &mut c1_beam_oracle);
    report(2, "WER matches recursive oracle", Some(30.0), &mut c2_wer_oracle);
    report(3, "SNR accuracy and unit-delta reverb", None, &mut c3_snr);
    report(4, "adapter shape suite", None, &mut c4_shapes);
    report(5, "zero-gate equivalence", None, &mut c5_zero_gate);
    report(6, "gradient check", Some(60.0), &mut c6_gradients);
    report(7, "frozen partition after 10 steps", None, &mut || c7_frozen(&mut runs));
    report(8, "overfit fixture", None, &mut || c8_overfit(&mut runs));
    report(9, "visual disambiguation on 3 seeds", None, &mut || c9_visual(&mut runs));
    report(10, "template golden file", None, &mut c10_template);
    report(11, "pipeline determinism", None, &mut || c11_determinism(&mut runs));
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
