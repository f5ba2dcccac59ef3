//! Flat `key = value` configuration files.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::datapipe::{ItemTable, SampleSet, SynthConfig};
use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Non-comment lines of a flat config as `(line, key, value)`.
pub fn parse_flat(path: &Path, text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!("{}:{}: expected `key = value`", path.display(), i + 1)));
        };
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("{}:{}: empty key", path.display(), i + 1)));
        }
        if out.iter().any(|(_, seen, _): &(usize, String, String)| seen == k) {
            return Err(Error::Config(format!("{}:{}: `{k}` given twice", path.display(), i + 1)));
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn scalar<T: FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse()
        .map_err(|_| format!("`{key}` expects a {}, got `{v}`", std::any::type_name::<T>()))
}

fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("`{key}` expects true or false, got `{v}`")),
    }
}

fn list(key: &str, v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| scalar(key, x.trim())).collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Training configuration; keys match their field names except `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub embedding_dim: usize,
    pub n_encoder_layers: usize,
    pub n_heads: usize,
    /// Feed-forward width of the encoder; 0 means `4·d_t`.
    pub d_ff: usize,
    pub transformer_dropout: f64,
    pub n_cross_layers: usize,
    pub cross_net_dropout: f64,
    pub deep_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub k: usize,
    /// History length; taken from the data header when absent.
    pub seq_len: Option<usize>,
    pub d_mm: Option<usize>,
    /// Declared item feature count `|T|` (id included), checked against items.tsv.
    pub item_features: Option<usize>,
    /// Declared side feature count, checked against the sample files.
    pub side_features: Option<usize>,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub eval_batch_size: usize,
    pub use_multimodal: bool,
    pub use_transformer: bool,
    pub use_dcnv2: bool,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 128,
            embedding_dim: 64,
            n_encoder_layers: 2,
            n_heads: 2,
            d_ff: 0,
            transformer_dropout: 0.2,
            n_cross_layers: 3,
            cross_net_dropout: 0.2,
            deep_hidden: vec![1024, 512, 256],
            head_hidden: vec![64, 32],
            k: 16,
            seq_len: None,
            d_mm: None,
            item_features: None,
            side_features: None,
            patience: 5,
            max_epochs: 100,
            seed: 42,
            eval_batch_size: 1024,
            use_multimodal: true,
            use_transformer: true,
            use_dcnv2: true,
            data: None,
            out: None,
        }
    }
}

impl TrainConfig {
    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let opt = |v: &str| -> std::result::Result<Option<usize>, String> {
            if v.is_empty() {
                Ok(None)
            } else {
                scalar(key, v).map(Some)
            }
        };
        match key {
            "learning_rate" => self.learning_rate = scalar(key, v)?,
            "batch_size" => self.batch_size = scalar(key, v)?,
            "embedding_dim" => self.embedding_dim = scalar(key, v)?,
            "n_encoder_layers" => self.n_encoder_layers = scalar(key, v)?,
            "n_heads" => self.n_heads = scalar(key, v)?,
            "d_ff" => self.d_ff = scalar(key, v)?,
            "transformer_dropout" => self.transformer_dropout = scalar(key, v)?,
            "n_cross_layers" => self.n_cross_layers = scalar(key, v)?,
            "cross_net_dropout" => self.cross_net_dropout = scalar(key, v)?,
            "deep_hidden" => self.deep_hidden = list(key, v)?,
            "head_hidden" => self.head_hidden = list(key, v)?,
            "k" => self.k = scalar(key, v)?,
            "N" => self.seq_len = opt(v)?,
            "d_mm" => self.d_mm = opt(v)?,
            "item_features" => self.item_features = opt(v)?,
            "side_features" => self.side_features = opt(v)?,
            "patience" => self.patience = scalar(key, v)?,
            "max_epochs" => self.max_epochs = scalar(key, v)?,
            "seed" => self.seed = scalar(key, v)?,
            "eval_batch_size" => self.eval_batch_size = scalar(key, v)?,
            "use_multimodal" => self.use_multimodal = flag(key, v)?,
            "use_transformer" => self.use_transformer = flag(key, v)?,
            "use_dcnv2" => self.use_dcnv2 = flag(key, v)?,
            "data" => self.data = (!v.is_empty()).then(|| PathBuf::from(v)),
            "out" => self.out = (!v.is_empty()).then(|| PathBuf::from(v)),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (line, k, v) in parse_flat(path, text)? {
            cfg.set(&k, &v)
                .map_err(|m| Error::Config(format!("{}:{line}: {m}", path.display())))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(path, &read_text(path)?)
    }

    /// Constraints that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate = {} must be finite and >= 0", self.learning_rate));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be >= 1".into());
        }
        for (name, p) in [
            ("transformer_dropout", self.transformer_dropout),
            ("cross_net_dropout", self.cross_net_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1)"));
            }
        }
        if let Some(n) = self.seq_len {
            if n == 0 {
                return bad("N must be >= 1".into());
            }
            if self.k > n {
                return bad(format!("k = {} exceeds N = {n}", self.k));
            }
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return bad("patience and max_epochs must be >= 1".into());
        }
        if self.use_transformer && (self.n_encoder_layers == 0 || self.n_heads == 0) {
            return bad("the encoder needs n_encoder_layers >= 1 and n_heads >= 1".into());
        }
        if self.use_dcnv2 && self.deep_hidden.is_empty() {
            return bad("deep_hidden must be non-empty when use_dcnv2 = true".into());
        }
        Ok(())
    }

    /// Every key, one per line, in a form [`TrainConfig::parse`] reads back
    /// to an equal value.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let rows: Vec<(&str, String)> = vec![
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("n_encoder_layers", self.n_encoder_layers.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("transformer_dropout", self.transformer_dropout.to_string()),
            ("n_cross_layers", self.n_cross_layers.to_string()),
            ("cross_net_dropout", self.cross_net_dropout.to_string()),
            ("deep_hidden", join(&self.deep_hidden)),
            ("head_hidden", join(&self.head_hidden)),
            ("k", self.k.to_string()),
            ("N", opt(self.seq_len)),
            ("d_mm", opt(self.d_mm)),
            ("item_features", opt(self.item_features)),
            ("side_features", opt(self.side_features)),
            ("patience", self.patience.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
            ("use_multimodal", self.use_multimodal.to_string()),
            ("use_transformer", self.use_transformer.to_string()),
            ("use_dcnv2", self.use_dcnv2.to_string()),
            ("data", path(&self.data)),
            ("out", path(&self.out)),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Fills `N`, `d_mm` and the feature counts from the data, rejecting any
    /// declared value the data contradicts.
    pub fn bind_data(&self, items: &ItemTable, samples: &SampleSet) -> Result<Self> {
        let mut out = self.clone();
        let check = |name: &str, declared: Option<usize>, actual: usize| match declared {
            Some(d) if d != actual => Err(Error::Config(format!(
                "config declares {name} = {d} but the data has {actual}"
            ))),
            _ => Ok(actual),
        };
        out.d_mm = Some(check("d_mm", self.d_mm, items.d_mm)?);
        out.item_features = Some(check("item_features", self.item_features, items.n_features)?);
        out.side_features = Some(check("side_features", self.side_features, samples.n_side)?);
        out.seq_len = Some(self.seq_len.unwrap_or(samples.seq_len));
        out.validate()?;
        Ok(out)
    }

    /// Architecture for the given vocabularies. Needs `N` and `d_mm` set,
    /// e.g. by [`TrainConfig::bind_data`].
    pub fn model_spec(&self, item_vocab: Vec<usize>, side_vocab: Vec<usize>) -> Result<ModelSpec> {
        let (Some(seq_len), Some(d_mm)) = (self.seq_len, self.d_mm) else {
            return Err(Error::Config("N and d_mm must be known before building a model".into()));
        };
        let d_item = item_vocab.len() * self.embedding_dim + if self.use_multimodal { d_mm } else { 0 };
        let spec = ModelSpec {
            item_vocab,
            side_vocab,
            embedding_dim: self.embedding_dim,
            d_mm,
            seq_len,
            k: self.k,
            n_encoder_layers: self.n_encoder_layers,
            n_heads: self.n_heads,
            d_ff: if self.d_ff == 0 { 8 * d_item } else { self.d_ff },
            transformer_dropout: self.transformer_dropout,
            n_cross_layers: self.n_cross_layers,
            cross_net_dropout: self.cross_net_dropout,
            deep_hidden: self.deep_hidden.clone(),
            head_hidden: self.head_hidden.clone(),
            use_multimodal: self.use_multimodal,
            use_transformer: self.use_transformer,
            use_dcnv2: self.use_dcnv2,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Generator settings in the same flat format; `N` is the history length.
pub fn parse_synth_config(path: &Path, text: &str) -> Result<SynthConfig> {
    let mut c = SynthConfig::default();
    for (line, key, v) in parse_flat(path, text)? {
        let k = key.as_str();
        let r: std::result::Result<(), String> = (|| {
            match k {
                "seed" => c.seed = scalar(k, &v)?,
                "n_users" => c.n_users = scalar(k, &v)?,
                "n_items" => c.n_items = scalar(k, &v)?,
                "d_mm" => c.d_mm = scalar(k, &v)?,
                "N" => c.seq_len = scalar(k, &v)?,
                "n_samples" => c.n_samples = scalar(k, &v)?,
                "positive_rate" => c.positive_rate = scalar(k, &v)?,
                "latent_dim" => c.latent_dim = scalar(k, &v)?,
                "n_categories" => c.n_categories = scalar(k, &v)?,
                "alpha" => c.alpha = scalar(k, &v)?,
                "beta" => c.beta = scalar(k, &v)?,
                "item_bias_std" => c.item_bias_std = scalar(k, &v)?,
                "mm_noise" => c.mm_noise = scalar(k, &v)?,
                "pool_size" => c.pool_size = scalar(k, &v)?,
                "n_val" => c.n_val = scalar(k, &v)?,
                "n_test" => c.n_test = scalar(k, &v)?,
                _ => return Err(format!("unknown key `{k}`")),
            }
            Ok(())
        })();
        r.map_err(|m| Error::Config(format!("{}:{line}: {m}", path.display())))?;
    }
    if c.n_users == 0 || c.n_items == 0 || c.n_samples == 0 || c.latent_dim == 0 || c.n_categories == 0 {
        return Err(Error::Config("generator counts must be >= 1".into()));
    }
    if c.seq_len == 0 {
        return Err(Error::Config("N must be >= 1".into()));
    }
    if !(c.positive_rate > 0.0 && c.positive_rate < 1.0) {
        return Err(Error::Config(format!("positive_rate = {} outside (0, 1)", c.positive_rate)));
    }
    if c.n_val + c.n_test >= c.n_samples {
        return Err(Error::Config("n_val + n_test leaves no training samples".into()));
    }
    Ok(c)
}

pub fn load_synth_config(path: impl AsRef<Path>) -> Result<SynthConfig> {
    let path = path.as_ref();
    parse_synth_config(path, &read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<TrainConfig> {
        TrainConfig::parse(Path::new("c.cfg"), text)
    }

    #[test]
    fn empty_file_gives_best_values() {
        let c = parse("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!(c.learning_rate, 5e-4);
        assert_eq!(c.embedding_dim, 64);
        assert_eq!((c.transformer_dropout, c.cross_net_dropout), (0.2, 0.2));
        assert_eq!((c.k, c.batch_size, c.patience), (16, 128, 5));
        assert_eq!((c.n_cross_layers, c.n_encoder_layers), (3, 2));
        assert_eq!(c.deep_hidden, vec![1024, 512, 256]);
        assert_eq!(c.head_hidden, vec![64, 32]);
    }

    #[test]
    fn values_and_errors() {
        let c = parse("# comment\nlearning_rate = 5e-4\nN = 32\nk = 0\ndeep_hidden = 8, 4\nuse_dcnv2 = false\n").unwrap();
        assert_eq!(c.learning_rate, 0.0005);
        assert_eq!(c.deep_hidden, vec![8, 4]);
        assert!(!c.use_dcnv2);

        let k40 = parse("k = 40\nN = 32\n");
        assert!(matches!(k40, Err(Error::Config(m)) if m.contains("k = 40")));
        assert!(matches!(parse("lr = 1\n"), Err(Error::Config(m)) if m.contains("c.cfg:1") && m.contains("`lr`")));
        assert!(matches!(parse("\nbatch_size = many\n"), Err(Error::Config(m)) if m.contains(":2")));
        assert!(parse("use_multimodal = yes\n").is_err());
        assert!(parse("transformer_dropout = 1.0\n").is_err());
        assert!(parse("embedding_dim = 0\n").is_err());
        assert!(parse("k = 1\nk = 2\n").is_err());
        assert!(parse("just words\n").is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.learning_rate = 1.0 / 3.0;
        c.seq_len = Some(24);
        c.data = Some(PathBuf::from("some/dir"));
        c.head_hidden = vec![];
        let back = parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn synth_config_keys() {
        let c = parse_synth_config(Path::new("g"), "N = 12\nbeta = 0\nn_samples = 100\nn_val = 10\nn_test = 10\n").unwrap();
        assert_eq!((c.seq_len, c.beta, c.n_samples), (12, 0.0, 100));
        assert!(parse_synth_config(Path::new("g"), "users = 3\n").is_err());
        assert!(parse_synth_config(Path::new("g"), "positive_rate = 1\n").is_err());
    }
}
