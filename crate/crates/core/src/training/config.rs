//! Training hyperparameters and the loss-history CSV.

use std::io::Write;
use std::path::Path;

use super::adam::AdamParams;
use super::loss::LossBreakdown;
use super::surrogate::DEFAULT_GAMMA;
use crate::error::{Error, Result};
use crate::kv::{self, KeyValues};
use crate::network::Profile;

pub const DEFAULT_LAMBDA_SYNOPS: f64 = 1e-6;
pub const DEFAULT_LAMBDA_WEIGHTMAX: f64 = 1e-3;
pub const DEFAULT_EPOCHS: usize = 50;
pub const DEFAULT_SYNOPS_WARMUP: usize = 3;

const KEYS: [&str; 10] = [
    "profile",
    "lr",
    "batch",
    "epochs",
    "lambda_synops",
    "lambda_weightmax",
    "synops_warmup",
    "gamma",
    "seed",
    "patience",
];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam: AdamParams,
    pub epochs: usize,
    pub lambda_synops: f64,
    pub lambda_weightmax: f64,
    /// Epochs trained without the synaptic-operation penalty. A network
    /// that is still silent gets almost no gradient from the MSE term, so
    /// an activity penalty applied from the first step can keep it silent.
    pub synops_warmup: usize,
    /// Surrogate gradient width.
    pub gamma: f64,
    pub seed: u64,
    /// Stop after this many epochs without a better validation error.
    pub patience: Option<usize>,
}

impl TrainConfig {
    /// Profile defaults: learning rate and batch size per framework.
    pub fn for_profile(profile: Profile) -> Self {
        let (learning_rate, batch_size) = match profile {
            Profile::SinabsLike => (1e-4, 200),
            Profile::LavaLike => (1e-3, 100),
            Profile::MetatfLike => (1e-4, 1000),
            Profile::Custom => (1e-3, 32),
        };
        Self {
            profile,
            learning_rate,
            batch_size,
            adam: AdamParams::new(learning_rate),
            epochs: DEFAULT_EPOCHS,
            lambda_synops: DEFAULT_LAMBDA_SYNOPS,
            lambda_weightmax: DEFAULT_LAMBDA_WEIGHTMAX,
            synops_warmup: DEFAULT_SYNOPS_WARMUP,
            gamma: DEFAULT_GAMMA,
            seed: 0,
            patience: None,
        }
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self.adam.learning_rate = lr;
        self
    }

    /// Synaptic-operation penalty weight in effect during `epoch`.
    pub fn lambda_synops_at(&self, epoch: usize) -> f64 {
        if epoch < self.synops_warmup {
            0.0
        } else {
            self.lambda_synops
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return bad("learning rate must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if [self.lambda_synops, self.lambda_weightmax].iter().any(|l| *l < 0.0 || !l.is_finite()) {
            return bad("penalty weights must be non-negative");
        }
        if self.gamma <= 0.0 || !self.gamma.is_finite() {
            return bad("surrogate width must be positive");
        }
        if self.patience == Some(0) {
            return bad("patience must be at least 1");
        }
        Ok(())
    }

    /// Reads a flat `key = value` file. `profile` selects the defaults and
    /// every other key overrides one of them.
    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let kv = KeyValues::parse(text, source)?;
        Self::from_kv(&kv)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_kv(&KeyValues::read(path)?)
    }

    fn from_kv(kv: &KeyValues) -> Result<Self> {
        if let Some(k) = kv.keys().find(|k| !KEYS.contains(k)) {
            return Err(kv.invalid(k, format!("unknown key `{k}`")));
        }
        let profile = match kv.get_str("profile") {
            Some(p) => Profile::parse(p).map_err(|_| kv.invalid("profile", format!("unknown profile `{p}`")))?,
            None => Profile::SinabsLike,
        };
        let mut cfg = Self::for_profile(profile);
        if let Some(lr) = kv.get::<f64>("lr")? {
            cfg = cfg.with_learning_rate(lr);
        }
        cfg.batch_size = kv.get("batch")?.unwrap_or(cfg.batch_size);
        cfg.epochs = kv.get("epochs")?.unwrap_or(cfg.epochs);
        cfg.lambda_synops = kv.get("lambda_synops")?.unwrap_or(cfg.lambda_synops);
        cfg.lambda_weightmax = kv.get("lambda_weightmax")?.unwrap_or(cfg.lambda_weightmax);
        cfg.synops_warmup = kv.get("synops_warmup")?.unwrap_or(cfg.synops_warmup);
        cfg.gamma = kv.get("gamma")?.unwrap_or(cfg.gamma);
        cfg.seed = kv.get("seed")?.unwrap_or(cfg.seed);
        cfg.patience = kv.get("patience")?.or(cfg.patience);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut entries = vec![
            ("profile", self.profile.name().to_string()),
            ("lr", self.learning_rate.to_string()),
            ("batch", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("lambda_synops", self.lambda_synops.to_string()),
            ("lambda_weightmax", self.lambda_weightmax.to_string()),
            ("synops_warmup", self.synops_warmup.to_string()),
            ("gamma", self.gamma.to_string()),
            ("seed", self.seed.to_string()),
        ];
        if let Some(p) = self.patience {
            entries.push(("patience", p.to_string()));
        }
        kv::render(entries)
    }
}

/// Writes `epoch,mse,synops,weightmax,total` with one row per epoch.
pub fn write_loss_history(path: &Path, history: &[LossBreakdown]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_loss_history_to(&mut w, history).map_err(|e| Error::io(path, e))
}

pub fn write_loss_history_to(w: &mut impl Write, history: &[LossBreakdown]) -> std::io::Result<()> {
    writeln!(w, "epoch,mse,synops,weightmax,total")?;
    for (epoch, l) in history.iter().enumerate() {
        writeln!(w, "{epoch},{},{},{},{}", l.mse, l.synops_penalty, l.weightmax_penalty, l.total)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_defaults() {
        let s = TrainConfig::for_profile(Profile::SinabsLike);
        assert_eq!((s.learning_rate, s.batch_size), (1e-4, 200));
        let l = TrainConfig::for_profile(Profile::LavaLike);
        assert_eq!((l.learning_rate, l.batch_size), (1e-3, 100));
        let m = TrainConfig::for_profile(Profile::MetatfLike);
        assert_eq!((m.learning_rate, m.batch_size), (1e-4, 1000));
        assert_eq!((s.adam.beta1, s.adam.beta2, s.adam.epsilon), (0.9, 0.999, 1e-8));
    }

    #[test]
    fn file_overrides_defaults() {
        let cfg = TrainConfig::parse("profile = lava_like\nbatch = 16\nseed = 9\n", "cfg").unwrap();
        assert_eq!(cfg.profile, Profile::LavaLike);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.seed, 9);
        let again = TrainConfig::parse(&cfg.to_text(), "again").unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn rejects_bad_files() {
        assert!(TrainConfig::parse("learning_rate = 1", "cfg").is_err());
        assert!(TrainConfig::parse("batch = 0", "cfg").is_err());
        assert!(TrainConfig::parse("gamma = -1", "cfg").is_err());
        assert!(TrainConfig::parse("profile = torch", "cfg").is_err());
        assert!(matches!(TrainConfig::parse("lr = fast", "cfg"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn loss_csv_layout() {
        let mut buf = Vec::new();
        let h = [LossBreakdown::new(0.5, 10.0, 2.0, 0.1, 1.0), LossBreakdown::new(0.25, 0.0, 1.0, 0.1, 1.0)];
        write_loss_history_to(&mut buf, &h).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,mse,synops,weightmax,total");
        assert_eq!(lines[1], "0,0.5,10,2,3.5");
        assert_eq!(lines[2], "1,0.25,0,1,1.25");
    }
}
