//! Run orchestration: configuration, the single-level and multilevel
//! training loops, metrics persistence, aggregation and comparison.

pub mod aggregate;
pub mod audit;
pub mod compare;
pub mod record;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{BatchCursor, TokenStream};
use crate::error::{Error, Result};
use crate::flops::{CostModel, FlopMeter};
use crate::model::{ModelConfig, ModelParams};
use crate::multilevel::{run_coarse_cycle, MultilevelSchedule};
use crate::optim::LrSchedule;
use crate::step::optimization_step;
pub use record::{read_metrics, Level, MetricsWriter, RunRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    Single,
    Multilevel,
}

impl RunMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(RunMode::Single),
            "multilevel" => Ok(RunMode::Multilevel),
            other => Err(Error::Config(format!(
                "mode must be 'single' or 'multilevel', got '{other}'"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RunMode::Single => "single",
            RunMode::Multilevel => "multilevel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenizerKind {
    /// Raw bytes of the corpus file, vocabulary 256.
    Byte,
    /// Pre-tokenized binary id file.
    Tokens,
}

impl TokenizerKind {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "byte" => Ok(TokenizerKind::Byte),
            "tokens" => Ok(TokenizerKind::Tokens),
            other => Err(Error::Config(format!(
                "tokenizer must be 'byte' or 'tokens', got '{other}'"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            TokenizerKind::Byte => "byte",
            TokenizerKind::Tokens => "tokens",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub mode: RunMode,
    pub total_fine_steps: usize,
    pub warmup_steps: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub schedule: MultilevelSchedule,
    pub micro_batch: usize,
    pub accumulation: usize,
    pub seq_len: usize,
    pub corpus: PathBuf,
    pub tokenizer: TokenizerKind,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    /// The desk-scale defaults: byte vocabulary, width 128, 12 blocks,
    /// 600 fine steps with 30-step warmup, 10 leading multilevel cycles of
    /// 20 coarse steps per model at blend 0.25.
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            mode: RunMode::Single,
            total_fine_steps: 600,
            warmup_steps: 30,
            lr_max: 1.2e-3,
            lr_min: 1.2e-4,
            schedule: MultilevelSchedule {
                num_cycles: 10,
                coarse_steps_per_model: 20,
                delta: 0.25,
                coarse_lr: 1.2e-3,
                replay_fine_batches: false,
            },
            micro_batch: 16,
            accumulation: 4,
            seq_len: 128,
            corpus: PathBuf::from("data/corpus.txt"),
            tokenizer: TokenizerKind::Byte,
            seed: 0,
            out_dir: PathBuf::from("runs/out"),
        }
    }
}

impl RunConfig {
    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule::WarmupCosine {
            warmup_steps: self.warmup_steps,
            total_steps: self.total_fine_steps,
            lr_max: self.lr_max,
            lr_min: self.lr_min,
        }
    }

    pub fn tokens_per_step(&self) -> u64 {
        (self.micro_batch * self.seq_len * self.accumulation) as u64
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lr_schedule().validate()?;
        self.schedule.validate()?;
        if self.total_fine_steps == 0 {
            return Err(Error::Config("total_fine_steps must be >= 1".into()));
        }
        if self.micro_batch == 0 || self.accumulation == 0 {
            return Err(Error::Config("micro_batch and accumulation must be >= 1".into()));
        }
        if self.seq_len == 0 || self.seq_len > self.model.context_length {
            return Err(Error::Config(format!(
                "seq_len {} must be in 1..={}",
                self.seq_len, self.model.context_length
            )));
        }
        if self.mode == RunMode::Multilevel && self.schedule.num_cycles > self.total_fine_steps {
            return Err(Error::Config(format!(
                "num_cycles {} exceeds total_fine_steps {}",
                self.schedule.num_cycles, self.total_fine_steps
            )));
        }
        Ok(())
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value '{value}' for {what}"));
        match key {
            "vocab_size" => self.model.vocab_size = value.parse().map_err(|_| bad(key))?,
            "context_length" => self.model.context_length = value.parse().map_err(|_| bad(key))?,
            "embed_dim" => self.model.embed_dim = value.parse().map_err(|_| bad(key))?,
            "num_blocks" => self.model.num_blocks = value.parse().map_err(|_| bad(key))?,
            "num_heads" => self.model.num_heads = value.parse().map_err(|_| bad(key))?,
            "ff_multiplier" => self.model.ff_multiplier = value.parse().map_err(|_| bad(key))?,
            "layer_norm_eps" => self.model.layer_norm_eps = value.parse().map_err(|_| bad(key))?,
            "mode" => self.mode = RunMode::parse(value)?,
            "total_fine_steps" => self.total_fine_steps = value.parse().map_err(|_| bad(key))?,
            "warmup_steps" => self.warmup_steps = value.parse().map_err(|_| bad(key))?,
            "lr_max" => self.lr_max = value.parse().map_err(|_| bad(key))?,
            "lr_min" => self.lr_min = value.parse().map_err(|_| bad(key))?,
            "num_cycles" => self.schedule.num_cycles = value.parse().map_err(|_| bad(key))?,
            "coarse_steps_per_model" => {
                self.schedule.coarse_steps_per_model = value.parse().map_err(|_| bad(key))?
            }
            "delta" => self.schedule.delta = value.parse().map_err(|_| bad(key))?,
            "coarse_lr" => self.schedule.coarse_lr = value.parse().map_err(|_| bad(key))?,
            "coarse_data" => {
                self.schedule.replay_fine_batches = match value {
                    "shared" => false,
                    "replay" => true,
                    _ => return Err(bad("coarse_data (shared|replay)")),
                }
            }
            "micro_batch" => self.micro_batch = value.parse().map_err(|_| bad(key))?,
            "accumulation" => self.accumulation = value.parse().map_err(|_| bad(key))?,
            "seq_len" => self.seq_len = value.parse().map_err(|_| bad(key))?,
            "corpus" => self.corpus = PathBuf::from(value),
            "tokenizer" => self.tokenizer = TokenizerKind::parse(value)?,
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Loads `key = value` lines over the defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut config = RunConfig::default();
        config.apply_file(path)?;
        Ok(config)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected 'key = value', got '{raw}'",
                    path.display(),
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// The fully resolved key/value view of this config.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            kv.insert(k.to_string(), v);
        };
        put("vocab_size", self.model.vocab_size.to_string());
        put("context_length", self.model.context_length.to_string());
        put("embed_dim", self.model.embed_dim.to_string());
        put("num_blocks", self.model.num_blocks.to_string());
        put("num_heads", self.model.num_heads.to_string());
        put("ff_multiplier", self.model.ff_multiplier.to_string());
        put("layer_norm_eps", format!("{:e}", self.model.layer_norm_eps));
        put("mode", self.mode.name().to_string());
        put("total_fine_steps", self.total_fine_steps.to_string());
        put("warmup_steps", self.warmup_steps.to_string());
        put("lr_max", format!("{:e}", self.lr_max));
        put("lr_min", format!("{:e}", self.lr_min));
        put("num_cycles", self.schedule.num_cycles.to_string());
        put(
            "coarse_steps_per_model",
            self.schedule.coarse_steps_per_model.to_string(),
        );
        put("delta", self.schedule.delta.to_string());
        put("coarse_lr", format!("{:e}", self.schedule.coarse_lr));
        put(
            "coarse_data",
            if self.schedule.replay_fine_batches {
                "replay".to_string()
            } else {
                "shared".to_string()
            },
        );
        put("micro_batch", self.micro_batch.to_string());
        put("accumulation", self.accumulation.to_string());
        put("seq_len", self.seq_len.to_string());
        put("corpus", self.corpus.display().to_string());
        put("tokenizer", self.tokenizer.name().to_string());
        put("seed", self.seed.to_string());
        put("out_dir", self.out_dir.display().to_string());
        kv
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug)]
pub struct RunOutcome {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub final_loss: f64,
    pub total_flops: u64,
}

/// Executes one training run, appending a record per optimization step at
/// every level and writing a final checkpoint. On a non-finite loss or
/// gradient the run aborts with the last consistent parameters checkpointed
/// and an error line in the metrics file.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    std::fs::create_dir_all(&config.out_dir)?;

    let corpus_bytes = std::fs::read(&config.corpus).map_err(|e| {
        Error::Input(format!("cannot read corpus {}: {e}", config.corpus.display()))
    })?;
    let stream = match config.tokenizer {
        TokenizerKind::Byte => TokenStream::tokenize(&corpus_bytes)?,
        TokenizerKind::Tokens => TokenStream::from_token_file(&config.corpus)?,
    };
    if stream.vocab_size() != config.model.vocab_size {
        return Err(Error::Config(format!(
            "corpus vocabulary {} does not match model vocabulary {}",
            stream.vocab_size(),
            config.model.vocab_size
        )));
    }

    // resolved config plus corpus identity, for aggregation and audits
    let mut kv = config.to_kv();
    kv.insert("corpus_bytes".into(), corpus_bytes.len().to_string());
    kv.insert("corpus_fnv1a".into(), format!("{:016x}", fnv1a(&corpus_bytes)));
    let config_text: String = kv
        .iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect();
    std::fs::write(config.out_dir.join("config.txt"), config_text)?;

    let params = ModelParams::<f32>::init(&config.model, config.seed)?;
    let named = params.named_tensors();
    let mut cursor = BatchCursor::new(config.seed, config.micro_batch, config.seq_len);
    let mut meter = FlopMeter::new();
    let cost = CostModel::new(&config.model, config.tokens_per_step());
    let lr_schedule = config.lr_schedule();
    let metrics_path = config.out_dir.join("metrics.jsonl");
    let mut writer = MetricsWriter::create(&metrics_path)?;
    let checkpoint_path = config.out_dir.join("model.ckpt");
    let start = Instant::now();
    let mut tokens_seen = 0u64;
    let mut final_loss = f64::NAN;

    for step in 1..=config.total_fine_steps {
        let lr = lr_schedule.lr_at(step)?;
        let result = optimization_step(
            &params,
            &named,
            &mut cursor,
            &stream,
            config.accumulation,
            lr,
        );
        let loss = match result {
            Ok(loss) => loss,
            Err(err @ Error::Numeric { .. }) => {
                save_checkpoint(&params, config.seed, &config.out_dir.join("abort.ckpt"))?;
                writer.append_error(step, &err.to_string())?;
                writer.finish()?;
                return Err(err);
            }
            Err(err) => return Err(err),
        };
        tokens_seen += config.tokens_per_step();
        let cumulative = meter.add(cost.fine_step)?;
        writer.append(&RunRecord {
            step,
            level: Level::Fine,
            inner_step: 0,
            loss,
            lr,
            cumulative_flops: cumulative,
            tokens_seen,
            seed: config.seed,
            wall_ms: start.elapsed().as_millis() as u64,
        })?;
        final_loss = loss;

        if config.mode == RunMode::Multilevel && step <= config.schedule.num_cycles {
            let cycle = run_coarse_cycle(
                &params,
                &config.schedule,
                &stream,
                &mut cursor,
                config.accumulation,
                &mut meter,
                &mut |info| {
                    tokens_seen += info.batch_tokens;
                    writer.append(&RunRecord {
                        step,
                        level: match info.parity {
                            crate::multilevel::Parity::Even => Level::CoarseEven,
                            crate::multilevel::Parity::Odd => Level::CoarseOdd,
                        },
                        inner_step: info.inner_step,
                        loss: info.loss,
                        lr: info.lr,
                        cumulative_flops: info.cumulative_flops,
                        tokens_seen,
                        seed: config.seed,
                        wall_ms: start.elapsed().as_millis() as u64,
                    })
                },
            );
            if let Err(err @ Error::Numeric { .. }) = cycle {
                save_checkpoint(&params, config.seed, &config.out_dir.join("abort.ckpt"))?;
                writer.append_error(step, &err.to_string())?;
                writer.finish()?;
                return Err(err);
            }
            cycle?;
        }
    }

    writer.finish()?;
    save_checkpoint(&params, config.seed, &checkpoint_path)?;
    Ok(RunOutcome {
        metrics_path,
        checkpoint_path,
        final_loss,
        total_flops: meter.total(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_file_parsing_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\n\nmode = multilevel\nembed_dim = 64\ndelta = 0.5\ncoarse_data = replay\n",
        )
        .unwrap();
        let mut rc = RunConfig::from_file(&path).unwrap();
        assert_eq!(rc.mode, RunMode::Multilevel);
        assert_eq!(rc.model.embed_dim, 64);
        assert_eq!(rc.schedule.delta, 0.5);
        assert!(rc.schedule.replay_fine_batches);
        // untouched keys keep their defaults
        assert_eq!(rc.model.num_blocks, 12);
        assert_eq!(rc.total_fine_steps, 600);

        rc.set("seed", "9").unwrap();
        assert_eq!(rc.seed, 9);
        assert!(rc.set("no_such_key", "1").is_err());
        assert!(rc.set("embed_dim", "xyz").is_err());

        // resolved view carries every documented key
        let kv = rc.to_kv();
        for key in [
            "vocab_size",
            "mode",
            "total_fine_steps",
            "num_cycles",
            "coarse_steps_per_model",
            "delta",
            "coarse_lr",
            "coarse_data",
            "micro_batch",
            "accumulation",
            "seq_len",
            "corpus",
            "tokenizer",
            "seed",
            "out_dir",
        ] {
            assert!(kv.contains_key(key), "missing {key}");
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let mut rc = RunConfig::default();
        rc.total_fine_steps = 0;
        assert!(rc.validate().is_err());

        let mut rc = RunConfig::default();
        rc.mode = RunMode::Multilevel;
        rc.schedule.num_cycles = rc.total_fine_steps + 1;
        assert!(rc.validate().is_err());

        let mut rc = RunConfig::default();
        rc.seq_len = rc.model.context_length + 1;
        assert!(rc.validate().is_err());

        let mut rc = RunConfig::default();
        rc.model.num_blocks = 7;
        assert!(rc.validate().is_err());

        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn run_rejects_vocabulary_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("corpus.txt");
        std::fs::write(&corpus, b"some bytes for a corpus").unwrap();
        let mut rc = RunConfig::default();
        rc.model.vocab_size = 50257; // byte tokenizer yields 256
        rc.corpus = corpus;
        rc.out_dir = dir.path().join("out");
        assert!(matches!(run(&rc), Err(Error::Config(_))));
    }
}
