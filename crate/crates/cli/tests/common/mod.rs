#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lasi_core::corpus::synthetic_rct;

/// Tiny model and schedule so whole pipelines run in seconds.
pub const SMALL_CONFIG: &str = r#"
[vocab]
min_freq = 1

[model]
d_model = 16
n_heads = 2
d_ff = 32
n_layers = 1

[pretrain]
epochs = 1
learning_rate = 2e-3
batch_size = 16

[train]
epochs = 2
learning_rate = 1e-3
batch_size = 16

[feature]
epochs = 5

[stitch]
gbas_heads = 2
gen_tokens = 6
"#;

pub struct Fixture {
    pub dir: tempfile::TempDir,
}

impl Fixture {
    /// Synthetic train/dev/test splits with the given document counts.
    pub fn new(train: usize, dev: usize, test: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        for (name, n, seed) in [("train", train, 1), ("dev", dev, 2), ("test", test, 3)] {
            std::fs::write(
                dir.path().join(format!("{name}.txt")),
                synthetic_rct(n, seed),
            )
            .unwrap();
        }
        std::fs::write(dir.path().join("config.toml"), SMALL_CONFIG).unwrap();
        Self { dir }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn work(&self) -> PathBuf {
        self.path().join("work")
    }

    pub fn config(&self) -> PathBuf {
        self.path().join("config.toml")
    }

    /// Runs the `lasi` binary against this fixture.
    pub fn lasi(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_lasi"))
            .args(args)
            .arg("--work")
            .arg(self.work())
            .arg("--config")
            .arg(self.config())
            .arg("--data-dir")
            .arg(self.path())
            .env_remove("LASI_DATA_DIR")
            .output()
            .unwrap()
    }

    /// Like [`lasi`](Self::lasi), failing the test on a non-zero exit.
    pub fn ok(&self, args: &[&str]) -> String {
        let out = self.lasi(args);
        assert!(
            out.status.success(),
            "lasi {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}
