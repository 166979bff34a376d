//! Stage orchestration: simulate → decode → build → pretrain-lm → train →
//! eval → report. Each stage reads its upstream outputs from disk, writes
//! its own, and records what it wrote in a `<stage>.meta.json` sidecar.

mod artifacts;
mod config;
pub mod selftest;

pub use artifacts::{hash_file, sha256_hex, StageMeta};
pub use config::{CorpusConfig, DecodeConfig, EvalConfig, PathsConfig, PipelineConfig};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asr::{ctc_prefix_beam_nbest, synth_lattice, EmissionLattice, HypothesisList};
use crate::audio::{read_wav, sample_corruption, simulate_noisy, write_wav, ImpulseResponse, Pools, Provenance};
use crate::corpus::{
    read_manifest, render_instruction, write_manifest, assign_split, CorpusBuilder, LipHypRecord, Split,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_systems, EvalContext, EvalReport, System};
use crate::lip::{preprocess_rois, read_rois, write_raw_rois, PreparedRois, RoiFormat};
use crate::lm::{
    check_shapes, decays, init_adapter, init_base, is_trainable, load_checkpoint, save_checkpoint, Tokenizer,
};
use crate::tensor::ParamSet;
use crate::toy::{confusion_strength, synth_pools, synth_rois, synth_speech, Lexicon};
use crate::train::{train, Partition, TrainConfig, TrainExample, TrainLog};

/// Bumped when the on-disk layout changes, invalidating old artifacts.
const FORMAT: &str = "lipger-pipeline-1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Simulate,
    Decode,
    Build,
    PretrainLm,
    Train,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Simulate,
        Stage::Decode,
        Stage::Build,
        Stage::PretrainLm,
        Stage::Train,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Decode => "decode",
            Stage::Build => "build",
            Stage::PretrainLm => "pretrain-lm",
            Stage::Train => "train",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }

    pub fn upstream(self) -> Option<Stage> {
        let i = Self::ALL.iter().position(|&s| s == self).expect("listed");
        i.checked_sub(1).map(|j| Self::ALL[j])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    /// Outputs already matched the config and upstream artifacts.
    UpToDate,
}

/// One simulated utterance: clean words, the corrupted audio and the crops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimUtterance {
    pub id: String,
    pub words: Vec<String>,
    pub audio_ref: PathBuf,
    pub roi_ref: PathBuf,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodedUtterance {
    pub id: String,
    pub confusion_strength: f64,
    pub lattice: EmissionLattice,
    pub hypotheses: HypothesisList,
}

/// Seed for item `i` of a named stream, independent across streams.
pub fn derive_seed(seed: u64, stream: &str, i: u64) -> u64 {
    let mut buf = seed.to_le_bytes().to_vec();
    buf.extend_from_slice(stream.as_bytes());
    buf.extend_from_slice(&i.to_le_bytes());
    let d = Sha256::digest(&buf);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub struct Pipeline {
    cfg: PipelineConfig,
    root: PathBuf,
    force: bool,
    progress: Box<dyn Fn(&str)>,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, root: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            root: root.into(),
            force: false,
            progress: Box::new(|_| {}),
        })
    }

    /// Rerun stages and accept upstream artifacts from a different config.
    pub fn force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn on_progress(mut self, f: impl Fn(&str) + 'static) -> Self {
        self.progress = Box::new(f);
        self
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn abs(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    fn rel(&self, p: &Path) -> PathBuf {
        p.strip_prefix(&self.root).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        let p = &self.cfg.paths;
        self.abs(match stage {
            Stage::Simulate => &p.simulated,
            Stage::Decode => &p.decoded,
            Stage::Build => &p.corpus,
            Stage::PretrainLm | Stage::Train => &p.checkpoints,
            Stage::Eval | Stage::Report => &p.reports,
        })
    }

    pub fn meta_path(&self, stage: Stage) -> PathBuf {
        StageMeta::path(&self.stage_dir(stage), stage.name())
    }

    /// Hash over the config sections read by `stage` and every stage before it.
    pub fn config_hash(&self, stage: Stage) -> String {
        let c = &self.cfg;
        let own = match stage {
            Stage::Simulate => serde_json::json!([c.seed, c.toy, c.audio, c.paths.pools]),
            Stage::Decode => serde_json::json!(c.decode),
            Stage::Build => serde_json::json!(c.corpus),
            Stage::PretrainLm => serde_json::json!([c.model, c.pretrain]),
            Stage::Train => serde_json::json!(c.train),
            Stage::Eval => serde_json::json!(c.eval),
            Stage::Report => serde_json::Value::Null,
        };
        let prev = stage.upstream().map(|s| self.config_hash(s)).unwrap_or_else(|| FORMAT.to_string());
        sha256_hex(format!("{prev}\n{own}").as_bytes())
    }

    fn upstream_hashes(&self, stage: Stage) -> Result<BTreeMap<String, String>> {
        let mut out = BTreeMap::new();
        if let Some(up) = stage.upstream() {
            let path = self.meta_path(up);
            let meta = StageMeta::read(&path)?.ok_or(Error::MissingArtifact { stage: up.name(), path })?;
            let expected = self.config_hash(up);
            if meta.config_hash != expected && !self.force {
                return Err(Error::StaleArtifact {
                    stage: up.name(),
                    path: self.meta_path(up),
                    expected,
                    found: meta.config_hash,
                });
            }
            out.insert(up.name().to_string(), meta.content_hash());
        }
        Ok(out)
    }

    /// Runs one stage unless its recorded outputs are already current.
    pub fn run(&self, stage: Stage) -> Result<Outcome> {
        let upstream = self.upstream_hashes(stage)?;
        let config_hash = self.config_hash(stage);
        let meta_path = self.meta_path(stage);
        if !self.force {
            if let Some(m) = StageMeta::read(&meta_path)? {
                if m.config_hash == config_hash && m.upstream == upstream && m.outputs_intact(&self.root) {
                    return Ok(Outcome::UpToDate);
                }
            }
        }
        let dir = self.stage_dir(stage);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let outputs = match stage {
            Stage::Simulate => self.simulate()?,
            Stage::Decode => self.decode()?,
            Stage::Build => self.build()?,
            Stage::PretrainLm => self.pretrain()?,
            Stage::Train => self.train_adapter()?,
            Stage::Eval => self.eval()?,
            Stage::Report => self.report()?,
        };
        let mut hashed = BTreeMap::new();
        for p in outputs {
            hashed.insert(self.rel(&p).to_string_lossy().replace('\\', "/"), hash_file(&p)?);
        }
        StageMeta {
            stage: stage.name().to_string(),
            config_hash,
            upstream,
            outputs: hashed,
        }
        .write(&meta_path)?;
        Ok(Outcome::Ran)
    }

    /// Every stage in order.
    pub fn run_all(&self) -> Result<Vec<(Stage, Outcome)>> {
        Stage::ALL.iter().map(|&s| Ok((s, self.run(s)?))).collect()
    }

    fn say(&self, msg: &str) {
        (self.progress)(msg);
    }

    // ---- file locations ----

    fn utterances_path(&self) -> PathBuf {
        self.stage_dir(Stage::Simulate).join("utterances.jsonl")
    }

    fn decoded_path(&self) -> PathBuf {
        self.stage_dir(Stage::Decode).join("hypotheses.jsonl")
    }

    pub fn split_path(&self, split: Split) -> PathBuf {
        let name = match split {
            Split::Train => "train.jsonl",
            Split::Test => "test.jsonl",
        };
        self.stage_dir(Stage::Build).join(name)
    }

    /// Training-split records reserved for the base LM.
    pub fn pretrain_path(&self) -> PathBuf {
        self.stage_dir(Stage::Build).join("pretrain.jsonl")
    }

    pub fn tokenizer_path(&self) -> PathBuf {
        self.stage_dir(Stage::Build).join("tokenizer.txt")
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.stage_dir(Stage::PretrainLm).join("base.ckpt")
    }

    pub fn lipger_checkpoint(&self) -> PathBuf {
        self.stage_dir(Stage::Train).join("lipger.ckpt")
    }

    pub fn eval_json(&self) -> PathBuf {
        self.stage_dir(Stage::Eval).join("eval.json")
    }

    pub fn report_path(&self) -> PathBuf {
        self.stage_dir(Stage::Report).join("report.md")
    }

    // ---- stages ----

    fn pools(&self) -> Result<Pools> {
        let Some(dir) = &self.cfg.paths.pools else {
            return synth_pools(&Lexicon::builtin(), &self.cfg.toy, derive_seed(self.cfg.seed, "pools", 0));
        };
        let dir = self.abs(dir);
        let mut pools = Pools::default();
        for (sub, clips) in [("interferer", &mut pools.interferers), ("noise", &mut pools.noises)] {
            for (id, path) in wav_files(&dir.join(sub))? {
                clips.insert(id, read_wav(&path)?);
            }
        }
        for (id, path) in wav_files(&dir.join("ir"))? {
            let clip = read_wav(&path)?;
            let sr = clip.sample_rate_hz();
            pools.irs.insert(id, ImpulseResponse::new(clip.into_samples(), sr)?);
        }
        Ok(pools)
    }

    fn simulate(&self) -> Result<Vec<PathBuf>> {
        let c = &self.cfg;
        let lex = Lexicon::builtin();
        let pools = self.pools()?;
        let dir = self.stage_dir(Stage::Simulate);
        for sub in ["audio", "roi"] {
            let d = dir.join(sub);
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut utts = Vec::with_capacity(c.toy.utterances);
        let mut outputs = Vec::with_capacity(2 * c.toy.utterances + 1);
        for i in 0..c.toy.utterances as u64 {
            let id = format!("utt{i:05}");
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, "words", i));
            let words = lex.sample_sentence(&mut rng);
            let speech = synth_speech(&words, &c.toy, derive_seed(c.seed, "speech", i))?;
            let spec = sample_corruption(derive_seed(c.seed, "corruption", i), &c.audio, &pools);
            let (noisy, provenance) = simulate_noisy(&speech, &spec, &pools)?;
            let rois = synth_rois(&words, &lex, &c.toy, derive_seed(c.seed, "rois", i))?;
            let audio = dir.join("audio").join(format!("{id}.wav"));
            let roi = dir.join("roi").join(format!("{id}.roi"));
            write_wav(&audio, &noisy)?;
            write_raw_rois(&roi, &rois)?;
            utts.push(SimUtterance {
                id,
                words,
                audio_ref: self.rel(&audio),
                roi_ref: self.rel(&roi),
                provenance,
            });
            outputs.extend([audio, roi]);
        }
        let manifest = self.utterances_path();
        write_manifest(&utts, &manifest)?;
        outputs.push(manifest);
        self.say(&format!("simulated {} utterances", utts.len()));
        Ok(outputs)
    }

    fn decode(&self) -> Result<Vec<PathBuf>> {
        let d = &self.cfg.decode;
        let lex = Lexicon::builtin();
        let vocab = lex.words();
        let confusions = lex.confusions();
        let utts: Vec<SimUtterance> = read_manifest(&self.utterances_path())?;
        let mut out = Vec::with_capacity(utts.len());
        for (i, u) in utts.iter().enumerate() {
            let strength = confusion_strength(u.provenance.measured_snr_db, d.max_strength);
            let seed = derive_seed(self.cfg.seed, "lattice", i as u64);
            let lattice = synth_lattice(&u.words, &vocab, &confusions, strength, d.frames_per_token, seed)?;
            let hypotheses = ctc_prefix_beam_nbest(&lattice, d.beam_width, d.n_plus_1)?;
            out.push(DecodedUtterance {
                id: u.id.clone(),
                confusion_strength: strength,
                lattice,
                hypotheses,
            });
        }
        let path = self.decoded_path();
        write_manifest(&out, &path)?;
        self.say(&format!("decoded {} utterances", out.len()));
        Ok(vec![path])
    }

    fn build(&self) -> Result<Vec<PathBuf>> {
        let c = &self.cfg.corpus;
        let utts: Vec<SimUtterance> = read_manifest(&self.utterances_path())?;
        let decoded: Vec<DecodedUtterance> = read_manifest(&self.decoded_path())?;
        let by_id: BTreeMap<&str, &SimUtterance> = utts.iter().map(|u| (u.id.as_str(), u)).collect();
        let mut builder = CorpusBuilder::new(Some(self.root.clone()));
        let (mut pretrain, mut train, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for d in &decoded {
            let u = by_id.get(d.id.as_str()).ok_or_else(|| {
                Error::Precondition(format!("decoded utterance {} has no simulated source", d.id))
            })?;
            let mut hyps = d.hypotheses.clone();
            if let Some(n) = c.nbest {
                hyps.hypotheses.truncate(n);
            }
            let split = assign_split(&u.id, c.split_ratio);
            let rec = builder.build_record(
                &u.words,
                hyps,
                u.audio_ref.clone(),
                u.roi_ref.clone(),
                RoiFormat::Raw,
                u.provenance.clone(),
                split,
            )?;
            match split {
                Split::Test => test.push(rec),
                Split::Train if assign_split(&format!("{}/pretrain", u.id), c.pretrain_ratio) == Split::Train => {
                    pretrain.push(rec)
                }
                Split::Train => train.push(rec),
            }
        }
        if pretrain.is_empty() || train.is_empty() || test.is_empty() {
            return Err(Error::Precondition(format!(
                "split produced {} pretrain, {} train and {} test records; all must be non-empty",
                pretrain.len(),
                train.len(),
                test.len()
            )));
        }
        let texts = pretrain
            .iter()
            .chain(&train)
            .map(|r| render_instruction(r).map(|s| s.full_text()))
            .collect::<Result<Vec<_>>>()?;
        let tokenizer = Tokenizer::from_texts(texts.iter().map(String::as_str));
        let (pp, tp, sp, kp) = (
            self.pretrain_path(),
            self.split_path(Split::Train),
            self.split_path(Split::Test),
            self.tokenizer_path(),
        );
        write_manifest(&pretrain, &pp)?;
        write_manifest(&train, &tp)?;
        write_manifest(&test, &sp)?;
        tokenizer.save(&kp)?;
        self.say(&format!(
            "built {} pretrain / {} train / {} test records, vocabulary {}",
            pretrain.len(),
            train.len(),
            test.len(),
            tokenizer.len()
        ));
        Ok(vec![pp, tp, sp, kp])
    }

    pub fn load_tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::load(&self.tokenizer_path())
    }

    pub fn load_records(&self, split: Split) -> Result<Vec<LipHypRecord>> {
        read_manifest(&self.split_path(split))
    }

    /// Reads and normalises a record's crops at the encoder's input size.
    pub fn load_rois(&self, record: &LipHypRecord) -> Result<PreparedRois> {
        let s = self.cfg.model.lip.roi_size;
        let rois = read_rois(&self.abs(&record.roi_ref), record.roi_format, self.cfg.toy.frame_rate_hz)?;
        preprocess_rois(&rois, (s, s))
    }

    /// Teacher-forced samples for `records`, with crops when `with_rois`.
    pub fn examples(
        &self,
        records: &[LipHypRecord],
        tokenizer: &Tokenizer,
        with_rois: bool,
    ) -> Result<Vec<TrainExample>> {
        records
            .iter()
            .map(|r| {
                let s = render_instruction(r)?;
                let sample = tokenizer.encode_sample(&s.prompt, &s.response);
                if sample.inputs.len() > self.cfg.model.max_len {
                    return Err(Error::Config(format!(
                        "record {} needs {} positions but model.max_len is {}",
                        r.id,
                        sample.inputs.len(),
                        self.cfg.model.max_len
                    )));
                }
                let rois = if with_rois { Some(self.load_rois(r)?) } else { None };
                Ok(TrainExample { sample, rois })
            })
            .collect()
    }

    fn fit(&self, what: &str, examples: &[TrainExample], params: &mut ParamSet, part: &Partition<'_>, cfg: &TrainConfig) -> Result<TrainLog> {
        let steps_per_epoch = examples.len().div_ceil(cfg.batch_size);
        let every = steps_per_epoch.max(1);
        let log = train(examples, params, part, &self.cfg.model, cfg, None, |s| {
            if s.step % every == 0 {
                self.say(&format!("{what} step {} loss {:.4} grad_norm {:.3}", s.step, s.loss, s.grad_norm));
            }
        })?;
        if let Some(l) = log.final_loss() {
            self.say(&format!("{what} finished after {} steps, final loss {l:.4}", log.steps.len()));
        }
        Ok(log)
    }

    fn base_template(&self, tokenizer: &Tokenizer) -> Result<ParamSet> {
        init_base(&self.cfg.model, tokenizer.len(), derive_seed(self.cfg.seed, "base-init", 0))
    }

    fn pretrain(&self) -> Result<Vec<PathBuf>> {
        let tokenizer = self.load_tokenizer()?;
        let records: Vec<LipHypRecord> = read_manifest(&self.pretrain_path())?;
        let examples = self.examples(&records, &tokenizer, false)?;
        let mut params = self.base_template(&tokenizer)?;
        let all = |_: &str| true;
        let part = Partition {
            trainable: &all,
            decays: &decays,
        };
        let log = self.fit("pretrain-lm", &examples, &mut params, &part, &self.cfg.pretrain)?;
        let dir = self.stage_dir(Stage::PretrainLm);
        log.write_csv(&dir.join("pretrain_log.csv"))?;
        let ckpt = self.base_checkpoint();
        save_checkpoint(&params, &ckpt)?;
        Ok(vec![ckpt])
    }

    pub fn load_base(&self, tokenizer: &Tokenizer) -> Result<ParamSet> {
        let base = load_checkpoint(&self.base_checkpoint())?;
        check_shapes(&base, &self.base_template(tokenizer)?)?;
        Ok(base)
    }

    pub fn load_lipger(&self, tokenizer: &Tokenizer) -> Result<ParamSet> {
        let p = load_checkpoint(&self.lipger_checkpoint())?;
        let mut template = self.base_template(tokenizer)?;
        template.extend(init_adapter(&self.cfg.model, 0)?);
        check_shapes(&p, &template)?;
        Ok(p)
    }

    fn train_adapter(&self) -> Result<Vec<PathBuf>> {
        let tokenizer = self.load_tokenizer()?;
        let records = self.load_records(Split::Train)?;
        let examples = self.examples(&records, &tokenizer, true)?;
        let mut params = self.load_base(&tokenizer)?;
        params.extend(init_adapter(&self.cfg.model, derive_seed(self.cfg.seed, "adapter-init", 0))?);
        let part = Partition {
            trainable: &is_trainable,
            decays: &decays,
        };
        let log = self.fit("train", &examples, &mut params, &part, &self.cfg.train)?;
        log.write_csv(&self.stage_dir(Stage::Train).join("train_log.csv"))?;
        let ckpt = self.lipger_checkpoint();
        save_checkpoint(&params, &ckpt)?;
        Ok(vec![ckpt])
    }

    fn eval(&self) -> Result<Vec<PathBuf>> {
        let tokenizer = self.load_tokenizer()?;
        let records = self.load_records(Split::Test)?;
        let systems = self.cfg.systems()?;
        let base = self.load_base(&tokenizer)?;
        let lipger = if systems.contains(&System::LipGer) {
            Some(self.load_lipger(&tokenizer)?)
        } else {
            None
        };
        let load = |r: &LipHypRecord| self.load_rois(r);
        let ctx = EvalContext {
            tokenizer: &tokenizer,
            model: &self.cfg.model,
            base: Some(&base),
            lipger: lipger.as_ref(),
            load_rois: &load,
            max_new_tokens: self.cfg.eval.max_new_tokens,
        };
        let report = evaluate_systems(&records, &systems, &ctx, serde_json::to_value(&self.cfg)?)?;
        let dir = self.stage_dir(Stage::Eval);
        let (json, table) = (self.eval_json(), dir.join("eval.txt"));
        report.write(&json, &table)?;
        self.say(&report.table());
        Ok(vec![json, table])
    }

    pub fn load_report(&self) -> Result<EvalReport> {
        let path = self.eval_json();
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    fn report(&self) -> Result<Vec<PathBuf>> {
        let report = self.load_report()?;
        let mut md = String::from("# Evaluation summary\n\n```\n");
        md.push_str(&report.table());
        md.push_str("```\n\n");
        if let Some(lip) = report.wer(System::LipGer) {
            md.push_str("Relative WER reduction of lipger:\n\n");
            for s in [System::OneBest, System::Lm, System::Ger] {
                if let Some(w) = report.wer(s) {
                    let rel = if w > 0.0 { 100.0 * (w - lip) / w } else { 0.0 };
                    let _ = writeln!(md, "- vs {}: {rel:.1}%", s.name());
                }
            }
            md.push('\n');
        }
        md.push_str("## Resolved configuration\n\n```toml\n");
        md.push_str(&self.cfg.to_toml());
        md.push_str("```\n");
        let path = self.report_path();
        std::fs::write(&path, md).map_err(|e| Error::io(&path, e))?;
        Ok(vec![path])
    }
}

/// `(stem, path)` of every `.wav` in `dir`, sorted by name.
fn wav_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            let stem = path.file_stem().expect("has extension").to_string_lossy().into_owned();
            out.push((stem, path));
        }
    }
    out.sort();
    Ok(out)
}
