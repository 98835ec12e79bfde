use std::fmt;

use crate::attention::{check_heads, ScaleMode, Stream, TransformerBlockConfig};
use crate::config::{join, parse_bool, parse_kv, parse_list, parse_value};
use crate::error::{Error, Result};
use crate::patch::{GridShape, WindowLayout};
use crate::tensor::numel;

/// One of the two learning tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Generation,
    Classification,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Generation => "gen",
            Task::Classification => "cls",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gen" => Ok(Task::Generation),
            "cls" => Ok(Task::Classification),
            _ => Err(Error::Config(format!("unknown task {s:?} (gen | cls)"))),
        }
    }

    pub fn other(self) -> Task {
        match self {
            Task::Generation => Task::Classification,
            Task::Classification => Task::Generation,
        }
    }

    pub fn stream(self) -> Stream {
        match self {
            Task::Generation => Stream::Generation,
            Task::Classification => Stream::Classification,
        }
    }

    /// Slot in `[gen, cls]` arrays.
    pub fn index(self) -> usize {
        match self {
            Task::Generation => 0,
            Task::Classification => 1,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Architecture and loss hyperparameters. The canonical text form (see
/// [`ModelConfig::to_text`]) is embedded in checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Spatial extents of the input scan.
    pub input: Vec<usize>,
    pub in_channels: usize,
    pub patch: Vec<usize>,
    pub window: Vec<usize>,
    pub stages: usize,
    pub base_channels: usize,
    /// Attention heads per encoder stage; decoder level `l` reuses `heads[l]`.
    pub heads: Vec<usize>,
    /// Per-axis factors applied by every merge (and undone by every expand).
    pub merge_factors: Vec<usize>,
    pub mlp_ratio: usize,
    pub num_classes: usize,
    pub adv_weight: f64,
    pub gradnorm_alpha: f64,
    pub gradnorm_lr: f64,
    pub scale: ScaleMode,
    pub interactive: bool,
    pub reference_task: Task,
    pub drop_rate: f64,
    pub ln_eps: f64,
    pub init_std: f64,
    pub disc_patch: Vec<usize>,
    pub disc_channels: usize,
    pub disc_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk_2d()
    }
}

impl ModelConfig {
    /// 64x64 single-channel input, patch 4, three stages from 24 channels.
    pub fn desk_2d() -> Self {
        ModelConfig {
            input: vec![64, 64],
            in_channels: 1,
            patch: vec![4, 4],
            window: vec![4, 4],
            stages: 3,
            base_channels: 24,
            heads: vec![3, 6, 12],
            merge_factors: vec![2, 2],
            mlp_ratio: 2,
            num_classes: 2,
            adv_weight: 0.01,
            gradnorm_alpha: 1.5,
            gradnorm_lr: 0.025,
            scale: ScaleMode::PerHead,
            interactive: true,
            reference_task: Task::Generation,
            drop_rate: 0.0,
            ln_eps: 1e-5,
            init_std: 0.1,
            disc_patch: vec![8, 8],
            disc_channels: 24,
            disc_heads: 3,
        }
    }

    /// 32³ input. Merges keep the depth axis so that channel arithmetic
    /// (×4 then ÷2 per merge) stays symmetric with the expands.
    pub fn desk_3d() -> Self {
        ModelConfig {
            input: vec![32, 32, 32],
            patch: vec![4, 4, 4],
            window: vec![2, 4, 4],
            merge_factors: vec![1, 2, 2],
            disc_patch: vec![8, 8, 8],
            ..ModelConfig::desk_2d()
        }
    }

    /// Small 16x16 variant (under 10k parameters) for full-model gradient checks.
    pub fn tiny_2d() -> Self {
        ModelConfig {
            input: vec![16, 16],
            patch: vec![2, 2],
            window: vec![4, 4],
            stages: 2,
            base_channels: 4,
            heads: vec![1, 2],
            mlp_ratio: 1,
            disc_patch: vec![4, 4],
            disc_channels: 4,
            disc_heads: 1,
            ..ModelConfig::desk_2d()
        }
    }

    pub fn ndim(&self) -> usize {
        self.input.len()
    }

    pub fn mode(&self) -> &'static str {
        if self.ndim() == 3 {
            "3d"
        } else {
            "2d"
        }
    }

    pub fn patch_volume(&self) -> usize {
        numel(&self.patch) * self.in_channels
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Grid after patch partition and the embedding.
    pub fn level0_grid(&self) -> GridShape {
        let axes: Vec<usize> = self.input.iter().zip(&self.patch).map(|(i, p)| i / p).collect();
        GridShape { axes, channels: self.base_channels }
    }

    /// Encoder grid shapes from level 0 to the bottleneck (`stages + 1` entries).
    pub fn level_grids(&self) -> Result<Vec<GridShape>> {
        let mut out = vec![self.level0_grid()];
        for _ in 0..self.stages {
            let next = out.last().unwrap().merged(&self.merge_factors)?;
            out.push(next);
        }
        Ok(out)
    }

    pub fn block_config(&self, level: usize) -> TransformerBlockConfig {
        TransformerBlockConfig {
            channels: self.channels(level),
            heads: self.heads[level],
            window: self.window.clone(),
            mlp_ratio: self.mlp_ratio,
            scale: self.scale,
            ln_eps: self.ln_eps,
            drop_rate: self.drop_rate,
        }
    }

    pub fn disc_grid(&self) -> GridShape {
        let axes: Vec<usize> = self.input.iter().zip(&self.disc_patch).map(|(i, p)| i / p).collect();
        GridShape { axes, channels: self.disc_channels }
    }

    pub fn disc_block_config(&self) -> TransformerBlockConfig {
        TransformerBlockConfig {
            channels: self.disc_channels,
            heads: self.disc_heads,
            window: self.window.clone(),
            mlp_ratio: self.mlp_ratio,
            scale: self.scale,
            ln_eps: self.ln_eps,
            drop_rate: self.drop_rate,
        }
    }

    /// Checks every divisibility constraint the model relies on.
    pub fn validate(&self) -> Result<()> {
        let d = self.ndim();
        let bad = |m: String| Err(Error::Config(m));
        if !(d == 2 || d == 3) {
            return bad(format!("input must be 2D or 3D, got {:?}", self.input));
        }
        for (name, v) in [
            ("patch", &self.patch),
            ("window", &self.window),
            ("merge_factors", &self.merge_factors),
            ("disc_patch", &self.disc_patch),
        ] {
            if v.len() != d {
                return bad(format!("{name} {v:?} has rank {} but input is {d}D", v.len()));
            }
            if v.contains(&0) {
                return bad(format!("{name} {v:?} contains zero"));
            }
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.mlp_ratio == 0 || self.stages == 0 {
            return bad("in_channels, base_channels, mlp_ratio and stages must be positive".into());
        }
        for (ax, (i, p)) in self.input.iter().zip(&self.patch).enumerate() {
            if i % p != 0 {
                return bad(format!("input extent {i} on axis {ax} not divisible by patch {p}"));
            }
        }
        if numel(&self.merge_factors) != 4 {
            return bad(format!(
                "merge factors {:?} must multiply to 4 so that expanding mirrors merging",
                self.merge_factors
            ));
        }
        if self.heads.len() != self.stages {
            return bad(format!("{} head counts for {} stages", self.heads.len(), self.stages));
        }
        let grids = self.level_grids()?;
        for (level, grid) in grids.iter().enumerate().take(self.stages) {
            check_heads(grid.channels, self.heads[level])?;
            WindowLayout::for_grid(&grid.axes, &self.window, false)?;
            WindowLayout::for_grid(&grid.axes, &self.window, true)?;
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if !(self.adv_weight >= 0.0) || !(self.gradnorm_alpha >= 0.0) || !(self.gradnorm_lr > 0.0) {
            return bad("adv_weight and gradnorm_alpha must be >= 0 and gradnorm_lr > 0".into());
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return bad(format!("drop_rate {} outside [0, 1)", self.drop_rate));
        }
        if !(self.ln_eps > 0.0) || !(self.init_std > 0.0) {
            return bad("ln_eps and init_std must be positive".into());
        }
        for (ax, (i, p)) in self.input.iter().zip(&self.disc_patch).enumerate() {
            if i % p != 0 {
                return bad(format!("input extent {i} on axis {ax} not divisible by discriminator patch {p}"));
            }
        }
        check_heads(self.disc_channels, self.disc_heads)?;
        let dg = self.disc_grid();
        WindowLayout::for_grid(&dg.axes, &self.window, true)?;
        Ok(())
    }

    /// Canonical `key=value` text; [`ModelConfig::from_text`] inverts it exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        put("input", join(&self.input));
        put("in_channels", self.in_channels.to_string());
        put("patch", join(&self.patch));
        put("window", join(&self.window));
        put("stages", self.stages.to_string());
        put("base_channels", self.base_channels.to_string());
        put("heads", join(&self.heads));
        put("merge_factors", join(&self.merge_factors));
        put("mlp_ratio", self.mlp_ratio.to_string());
        put("num_classes", self.num_classes.to_string());
        put("adv_weight", self.adv_weight.to_string());
        put("gradnorm_alpha", self.gradnorm_alpha.to_string());
        put("gradnorm_lr", self.gradnorm_lr.to_string());
        put("scale", self.scale.as_str().to_string());
        put("interactive", self.interactive.to_string());
        put("reference_task", self.reference_task.to_string());
        put("drop_rate", self.drop_rate.to_string());
        put("ln_eps", self.ln_eps.to_string());
        put("init_std", self.init_std.to_string());
        put("disc_patch", join(&self.disc_patch));
        put("disc_channels", self.disc_channels.to_string());
        put("disc_heads", self.disc_heads.to_string());
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::desk_2d();
        for (k, v) in parse_kv(text)?.iter().map(|e| (e.key.clone(), e)) {
            if !cfg.set(&k, v)? {
                return Err(Error::Config(format!("line {}: unknown model key {k:?}", v.line)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one entry; returns `false` if the key is not a model key.
    pub fn set(&mut self, key: &str, e: &crate::config::Entry) -> Result<bool> {
        match key {
            "input" => self.input = parse_list(e)?,
            "in_channels" => self.in_channels = parse_value(e)?,
            "patch" => self.patch = parse_list(e)?,
            "window" => self.window = parse_list(e)?,
            "stages" => self.stages = parse_value(e)?,
            "base_channels" => self.base_channels = parse_value(e)?,
            "heads" => self.heads = parse_list(e)?,
            "merge_factors" => self.merge_factors = parse_list(e)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(e)?,
            "num_classes" => self.num_classes = parse_value(e)?,
            "adv_weight" => self.adv_weight = parse_value(e)?,
            "gradnorm_alpha" => self.gradnorm_alpha = parse_value(e)?,
            "gradnorm_lr" => self.gradnorm_lr = parse_value(e)?,
            "scale" => self.scale = ScaleMode::parse(&e.value)?,
            "interactive" => self.interactive = parse_bool(e)?,
            "reference_task" => self.reference_task = Task::parse(&e.value)?,
            "drop_rate" => self.drop_rate = parse_value(e)?,
            "ln_eps" => self.ln_eps = parse_value(e)?,
            "init_std" => self.init_std = parse_value(e)?,
            "disc_patch" => self.disc_patch = parse_list(e)?,
            "disc_channels" => self.disc_channels = parse_value(e)?,
            "disc_heads" => self.disc_heads = parse_value(e)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}
