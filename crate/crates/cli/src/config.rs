//! Run configuration: a flat `key = value` file merged with command-line
//! overrides. Every tunable default has a key here; unknown keys are
//! rejected with their source location.

use std::fmt::Write as _;
use std::path::Path;

use despk_core::train::{LossSet, MiMode, SpeakerLossKind, TrainConfig};
use despk_core::{Error, Result};

/// One recognized key with its default (rendered into `--help`).
pub struct KeySpec {
    pub key: &'static str,
    pub default: String,
    pub help: &'static str,
}

/// Training configuration under construction. `n_classes = 0` stands for
/// "infer the classifier width from the corpus when the run starts".
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut train = TrainConfig::default();
        train.model.n_classes = 0;
        RunConfig { train }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str, at: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!(
            "{at}: key {key} cannot parse {value:?} as {}",
            std::any::type_name::<T>()
        ))
    })
}

fn parse_bool(key: &str, value: &str, at: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{at}: key {key} expects true/false/1/0, got {value:?}"
        ))),
    }
}

fn parse_channels(key: &str, value: &str, at: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|v| parse::<usize>(key, v.trim(), at))
        .collect::<Result<Vec<usize>>>()
        .and_then(|c| {
            if c.is_empty() {
                Err(Error::Config(format!("{at}: key {key} needs at least one channel")))
            } else {
                Ok(c)
            }
        })
}

impl RunConfig {
    /// Every recognized key with its default value and a one-line meaning.
    pub fn key_specs() -> Vec<KeySpec> {
        let d = TrainConfig::default();
        let ks = |key, default: String, help| KeySpec { key, default, help };
        vec![
            ks("d_emb", d.model.d_emb.to_string(), "embedding width of both encoders"),
            ks("n_classes", "0".into(), "classifier width; 0 = number of corpus speakers"),
            ks("mel_bins", d.model.mel_bins.to_string(), "mel bands of the reconstruction target"),
            ks("enc_channels", "4,8,16".into(), "encoder conv channels, comma-separated"),
            ks("enc_hidden", d.model.enc_hidden.to_string(), "encoder frame-layer width"),
            ks("dec_channels", "16,8,8".into(), "decoder transposed-conv channels"),
            ks("dec_hidden", d.model.dec_hidden.to_string(), "decoder seed-layer width"),
            ks("critic_hidden", d.model.critic_hidden.to_string(), "MI critic hidden width"),
            ks("window_ms", d.frame.window_ms.to_string(), "analysis window length, ms"),
            ks("hop_ms", d.frame.hop_ms.to_string(), "hop between frames, ms"),
            ks("fft_size", d.frame.fft_size.to_string(), "FFT length; bins = fft_size/2 + 1"),
            ks("seed", d.seed.to_string(), "master RNG seed"),
            ks("batch_size", d.batch_size.to_string(), "utterances per training step"),
            ks("segment_s", d.segment_s.to_string(), "training segment length, seconds"),
            ks(
                "steps_per_epoch",
                d.steps_per_epoch.to_string(),
                "steps per epoch; 0 = one pass over the corpus",
            ),
            ks("phase1_epochs", d.phase1_epochs.to_string(), "epochs of joint pre-training"),
            ks("phase2_epochs", d.phase2_epochs.to_string(), "epochs of two-stage refinement"),
            ks("lr", d.schedule.base_lr.to_string(), "base Adam learning rate"),
            ks("halve_every", d.schedule.halve_every.to_string(), "epochs between lr halvings"),
            ks("w_speaker", d.weights.speaker.to_string(), "weight of the speaker loss"),
            ks("w_mi", d.weights.mi.to_string(), "weight of the MI (or adversarial) term"),
            ks("w_recon", d.weights.recon.to_string(), "weight of the reconstruction loss"),
            ks("w_identity", d.weights.identity.to_string(), "weight of the identity-change loss"),
            ks("losses", "ls,lmi,lr,lic".into(), "enabled criteria from ls,lmi,lr,lic,ladv"),
            ks("mi_mode", "cooperative".into(), "main-network stance on V: cooperative|adversarial"),
            ks(
                "phase2_keep_criteria",
                d.phase2_keep_criteria.to_string(),
                "keep speaker/MI criteria active in phase II",
            ),
            ks("speaker_loss", "ce".into(), "speaker criterion: ce (cross-entropy) | am (angular margin)"),
            ks("am_margin", d.am_margin.to_string(), "angular-margin offset m"),
            ks("am_scale", d.am_scale.to_string(), "angular-margin scale s"),
            ks("adam_beta1", d.adam_beta1.to_string(), "Adam first-moment decay"),
            ks("adam_beta2", d.adam_beta2.to_string(), "Adam second-moment decay"),
            ks("adam_eps", d.adam_eps.to_string(), "Adam denominator epsilon"),
        ]
    }

    /// Key listing rendered under `--help`.
    pub fn help_listing() -> String {
        let mut out = String::from("Configuration keys (config file `key = value`, or --set KEY=VALUE):\n");
        for spec in Self::key_specs() {
            writeln!(out, "  {} = {}\n      {}", spec.key, spec.default, spec.help)
                .expect("string write");
        }
        out
    }

    /// Applies one assignment; `at` names the source for error messages.
    pub fn apply(&mut self, key: &str, value: &str, at: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "d_emb" => t.model.d_emb = parse(key, value, at)?,
            "n_classes" => t.model.n_classes = parse(key, value, at)?,
            "mel_bins" => t.model.mel_bins = parse(key, value, at)?,
            "enc_channels" => t.model.enc_channels = parse_channels(key, value, at)?,
            "enc_hidden" => t.model.enc_hidden = parse(key, value, at)?,
            "dec_channels" => t.model.dec_channels = parse_channels(key, value, at)?,
            "dec_hidden" => t.model.dec_hidden = parse(key, value, at)?,
            "critic_hidden" => t.model.critic_hidden = parse(key, value, at)?,
            "window_ms" => t.frame.window_ms = parse(key, value, at)?,
            "hop_ms" => t.frame.hop_ms = parse(key, value, at)?,
            "fft_size" => t.frame.fft_size = parse(key, value, at)?,
            "seed" => t.seed = parse(key, value, at)?,
            "batch_size" => t.batch_size = parse(key, value, at)?,
            "segment_s" => t.segment_s = parse(key, value, at)?,
            "steps_per_epoch" => t.steps_per_epoch = parse(key, value, at)?,
            "phase1_epochs" => t.phase1_epochs = parse(key, value, at)?,
            "phase2_epochs" => t.phase2_epochs = parse(key, value, at)?,
            "lr" => t.schedule.base_lr = parse(key, value, at)?,
            "halve_every" => t.schedule.halve_every = parse(key, value, at)?,
            "w_speaker" => t.weights.speaker = parse(key, value, at)?,
            "w_mi" => t.weights.mi = parse(key, value, at)?,
            "w_recon" => t.weights.recon = parse(key, value, at)?,
            "w_identity" => t.weights.identity = parse(key, value, at)?,
            "losses" => {
                t.losses =
                    LossSet::parse(value).map_err(|e| Error::Config(format!("{at}: {e}")))?
            }
            "mi_mode" => {
                t.mi_mode =
                    MiMode::parse(value).map_err(|e| Error::Config(format!("{at}: {e}")))?
            }
            "phase2_keep_criteria" => t.phase2_keep_criteria = parse_bool(key, value, at)?,
            "speaker_loss" => {
                t.speaker_loss = SpeakerLossKind::parse(value)
                    .map_err(|e| Error::Config(format!("{at}: {e}")))?
            }
            "am_margin" => t.am_margin = parse(key, value, at)?,
            "am_scale" => t.am_scale = parse(key, value, at)?,
            "adam_beta1" => t.adam_beta1 = parse(key, value, at)?,
            "adam_beta2" => t.adam_beta2 = parse(key, value, at)?,
            "adam_eps" => t.adam_eps = parse(key, value, at)?,
            _ => return Err(Error::Config(format!("{at}: unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Merges a flat `key = value` file. `#` starts a comment; sections are
    /// not supported.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{}:{}", path.display(), ln + 1);
            if line.starts_with('[') {
                return Err(Error::Config(format!(
                    "{at}: sections are not supported; use flat key = value lines"
                )));
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("{at}: expected key = value, got {line:?}")));
            };
            self.apply(key.trim(), value.trim(), &at)?;
        }
        Ok(())
    }

    /// Applies one `KEY=VALUE` command-line override.
    pub fn apply_set(&mut self, kv: &str) -> Result<()> {
        let Some((key, value)) = kv.split_once('=') else {
            return Err(Error::Config(format!("--set {kv:?}: expected KEY=VALUE")));
        };
        self.apply(key.trim(), value.trim(), "--set")
    }

    /// Fills the corpus- and geometry-derived fields and returns the final
    /// training configuration.
    pub fn resolve(&self, n_speakers: usize, sample_rate: u32) -> Result<TrainConfig> {
        let mut cfg = self.train.clone();
        if cfg.model.n_classes == 0 {
            cfg.model.n_classes = n_speakers;
        }
        cfg.model.bins = cfg.frame.bins();
        cfg.model.frames =
            despk_core::train::frames_for_segment(&cfg.frame, cfg.segment_s, sample_rate)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_key_in_the_listing_round_trips_through_apply() {
        let mut rc = RunConfig::default();
        for spec in RunConfig::key_specs() {
            rc.apply(spec.key, &spec.default, "test").unwrap_or_else(|e| {
                panic!("default for {} rejected: {e}", spec.key);
            });
        }
        // defaults re-applied leave the training config at its defaults
        let mut expect = TrainConfig::default();
        expect.model.n_classes = 0;
        assert_eq!(format!("{:?}", rc.train), format!("{expect:?}"));
    }

    #[test]
    fn unknown_keys_and_malformed_lines_are_rejected() {
        let mut rc = RunConfig::default();
        let err = rc.apply("dropout", "0.5", "cfg:3").unwrap_err();
        assert!(err.to_string().contains("unknown key"), "{err}");
        assert!(err.to_string().contains("cfg:3"), "{err}");
        assert!(rc.apply_set("no_equals_sign").is_err());
        assert!(rc.apply("batch_size", "many", "cfg:1").is_err());
        assert!(rc.apply("losses", "ls,bogus", "cfg:2").is_err());
    }

    #[test]
    fn file_merge_handles_comments_and_rejects_sections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# comment\nbatch_size = 4  # inline\n\nsegment_s = 0.5\n").unwrap();
        let mut rc = RunConfig::default();
        rc.apply_file(&path).unwrap();
        assert_eq!(rc.train.batch_size, 4);
        assert_eq!(rc.train.segment_s, 0.5);

        std::fs::write(&path, "[model]\nd_emb = 8\n").unwrap();
        let err = RunConfig::default().apply_file(&path).unwrap_err();
        assert!(err.to_string().contains("sections"), "{err}");
    }

    #[test]
    fn resolve_fills_classes_and_geometry() {
        let mut rc = RunConfig::default();
        rc.apply("segment_s", "1.0", "t").unwrap();
        let cfg = rc.resolve(12, 16_000).unwrap();
        assert_eq!(cfg.model.n_classes, 12);
        assert_eq!(cfg.model.bins, 257);
        assert_eq!(cfg.model.frames, 98);
        // explicit n_classes wins over inference
        rc.apply("n_classes", "7", "t").unwrap();
        assert_eq!(rc.resolve(12, 16_000).unwrap().model.n_classes, 7);
    }

    #[test]
    fn help_listing_names_every_key_and_default() {
        let text = RunConfig::help_listing();
        for spec in RunConfig::key_specs() {
            assert!(
                text.contains(&format!("{} = {}", spec.key, spec.default)),
                "missing {}",
                spec.key
            );
        }
    }
}
