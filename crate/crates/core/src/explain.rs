//! Maps patch rewards back onto pixels and renders them as heatmaps.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::discriminator::{observation_pairs, Discriminator};
use crate::env::{run_episode, scripted_expert, Episode, EnvConfig, PointMassEnv, State, Trajectory};
use crate::error::{Error, Result};
use crate::nets::{Module, PatchGeometry};
use crate::reward::{transform, RewardConfig};
use crate::tensor::{Tape, Tensor};

/// Row-major 2-D map.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Values in `[0, 1]` at input resolution.
pub type AttentionMap = Grid;
/// Signed per-pixel reward whose total equals the patch total.
pub type PixelRewardMap = Grid;

impl Grid {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape("grid", format!("{rows}x{cols} with {} values", data.len())));
        }
        Ok(Grid { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Grid {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }
}

/// Rescales to `[0, 1]`; a constant map becomes 0.5 everywhere.
pub fn min_max_normalize(values: &mut [f64]) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in values.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.5 };
    }
}

/// Channel-wise L2 norm of the discriminator's penultimate feature map for a
/// single observation pair `[2·stack, H, W]` (or `[1, 2·stack, H, W]`),
/// nearest-neighbour upsampled to the input and min-max normalized.
pub fn attention_map(disc: &Discriminator, pair: &Tensor) -> Result<AttentionMap> {
    let net = &disc.net;
    let (h, w) = net.input_hw;
    let want = [net.in_channels, h, w];
    let s = pair.shape();
    if !(s == want || (s.len() == 4 && s[0] == 1 && s[1..] == want)) {
        return Err(Error::shape("attention_map", format!("expected {want:?}, got {s:?}")));
    }
    if net.convs.len() < 2 {
        return Err(Error::Spec("attention needs at least two conv layers".into()));
    }
    let mut tape = Tape::inference();
    let x = tape.leaf(vec![1, want[0], h, w], pair.data().to_vec(), false)?;
    let vars = net.bind(&mut tape, false);
    let trace = net.trace(&mut tape, &vars, x)?;
    let feat = trace.layers[trace.layers.len() - 2];
    let fs = tape.shape(feat).to_vec();
    let (c, fh, fw) = (fs[1], fs[2], fs[3]);
    let fv = tape.value(feat);
    let mut norms = vec![0.0; fh * fw];
    for ch in 0..c {
        for (i, n) in norms.iter_mut().enumerate() {
            *n += fv[ch * fh * fw + i].powi(2);
        }
    }
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        let fr = r * fh / h;
        for col in 0..w {
            data.push(norms[fr * fw + col * fw / w].sqrt());
        }
    }
    min_max_normalize(&mut data);
    Grid::new(h, w, data)
}

/// Spreads each patch reward over its clipped input footprint in proportion
/// to the attention there (uniformly when that attention sums to zero) and
/// sums the contributions.
pub fn patch_to_pixels(rewards: &Grid, geometry: &PatchGeometry, attention: &AttentionMap) -> Result<PixelRewardMap> {
    if (rewards.rows, rewards.cols) != geometry.grid {
        return Err(Error::shape(
            "patch_to_pixels",
            format!(
                "reward grid {}x{} vs geometry grid {:?}",
                rewards.rows, rewards.cols, geometry.grid
            ),
        ));
    }
    if (attention.rows, attention.cols) != geometry.input {
        return Err(Error::shape(
            "patch_to_pixels",
            format!(
                "attention {}x{} vs input {:?}",
                attention.rows, attention.cols, geometry.input
            ),
        ));
    }
    let (h, w) = geometry.input;
    let mut out = vec![0.0; h * w];
    for (i, fp) in geometry.footprints.iter().enumerate() {
        let r = rewards.data[i];
        if fp.area() == 0 {
            let (y, x) = nearest_pixel(geometry, i);
            out[y * w + x] += r;
            continue;
        }
        let rows = fp.top..fp.top + fp.height;
        let cols = fp.left..fp.left + fp.width;
        let total: f64 = rows
            .clone()
            .flat_map(|y| cols.clone().map(move |x| (y, x)))
            .map(|(y, x)| attention.at(y, x))
            .sum();
        for y in rows {
            for x in cols.clone() {
                let share = if total > 0.0 {
                    attention.at(y, x) / total
                } else {
                    1.0 / fp.area() as f64
                };
                out[y * w + x] += r * share;
            }
        }
    }
    Grid::new(h, w, out)
}

/// In-image pixel closest to the centre of patch `i`, for patches whose
/// receptive field lies entirely in the padding.
fn nearest_pixel(g: &PatchGeometry, i: usize) -> (usize, usize) {
    let centre = |idx: usize, n: usize| {
        let c = g.origin + (idx * g.jump) as isize + (g.receptive_field as isize - 1) / 2;
        c.clamp(0, n as isize - 1) as usize
    };
    (centre(i / g.grid.1, g.input.0), centre(i % g.grid.1, g.input.1))
}

/// Per-patch rewards (transformed probabilities) for each pair in `pairs`.
pub fn patch_rewards(disc: &Discriminator, reward: &RewardConfig, pairs: &Tensor) -> Result<Vec<Grid>> {
    let probs = disc.probs(pairs)?;
    let (p, q) = disc.grid();
    (0..pairs.shape()[0])
        .map(|i| {
            let r: Vec<f64> = transform(probs.sample(i), reward.transform)
                .into_iter()
                .map(|v| v * reward.scale)
                .collect();
            Grid::new(p, q, r)
        })
        .collect()
}

/// Pixel reward maps for each pair, together with the attention used.
pub fn explain_pairs(disc: &Discriminator, reward: &RewardConfig, pairs: &Tensor) -> Result<Vec<(AttentionMap, PixelRewardMap)>> {
    let geometry = disc.net.geometry()?;
    let rewards = patch_rewards(disc, reward, pairs)?;
    let s = pairs.shape();
    rewards
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let pair = Tensor::new(s[1..].to_vec(), pairs.sample(i).to_vec())?;
            let att = attention_map(disc, &pair)?;
            let px = patch_to_pixels(r, &geometry, &att)?;
            Ok((att, px))
        })
        .collect()
}

/// Consecutive observation pairs `[T, 2·stack, H, W]` of a recorded episode.
pub fn episode_pairs(ep: &Episode) -> Result<Tensor> {
    let t = ep.observations.len().saturating_sub(1);
    if t == 0 {
        return Err(Error::Insufficient("episode has no transitions".into()));
    }
    let shape = ep.observations[0].shape();
    let batch = |range: std::ops::Range<usize>| {
        let data = ep.observations[range].iter().flat_map(|o| o.data().iter().copied()).collect();
        let mut sh = vec![t];
        sh.extend_from_slice(shape);
        Tensor::new(sh, data)
    };
    observation_pairs(&batch(0..t)?, &batch(1..t + 1)?)
}

/// Consecutive observation pairs of a stored demonstration.
pub fn trajectory_pairs(t: &Trajectory) -> Result<Tensor> {
    let n = t.len();
    if n == 0 {
        return Err(Error::Insufficient("trajectory has no transitions".into()));
    }
    let (c, h, w) = t.frame_shape();
    let per = c * h * w;
    let obs = t.observations.data();
    let s = Tensor::new(vec![n, c, h, w], obs[..n * per].to_vec())?;
    let s_next = Tensor::new(vec![n, c, h, w], obs[per..].to_vec())?;
    observation_pairs(&s, &s_next)
}

/// Which policy generates the frames to explain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameSource {
    Expert,
    Random,
}

/// Observation pairs from `episodes` fresh rollouts of the scripted expert
/// or a uniform random policy, with every pair kept.
pub fn rollout_pairs(env: &EnvConfig, source: FrameSource, seed: u64, episodes: usize) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    collect_pairs(env, seed, episodes, |_, s| {
        Ok(match source {
            FrameSource::Expert => scripted_expert(s),
            FrameSource::Random => [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)],
        })
    })
}

/// Observation pairs from `episodes` rollouts of an arbitrary policy.
pub fn collect_pairs<F>(env: &EnvConfig, seed: u64, episodes: usize, mut policy: F) -> Result<Tensor>
where
    F: FnMut(&Tensor, &State) -> Result<[f64; 2]>,
{
    let mut e = PointMassEnv::new(env.clone(), seed)?;
    let mut parts = Vec::new();
    for _ in 0..episodes {
        let ep = run_episode(&mut e, &mut policy, true)?;
        parts.push(episode_pairs(&ep)?);
    }
    let Some(first) = parts.first() else {
        return Err(Error::Insufficient("no episodes requested".into()));
    };
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|p| p.shape()[0]).sum();
    Tensor::new(shape, parts.into_iter().flat_map(Tensor::into_data).collect())
}

/// Mean mapped pixel reward over all pairs.
pub fn mean_pixel_reward(disc: &Discriminator, reward: &RewardConfig, pairs: &Tensor) -> Result<f64> {
    let maps = explain_pairs(disc, reward, pairs)?;
    Ok(maps.iter().map(|(_, px)| px.mean()).sum::<f64>() / maps.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapFormat {
    Csv,
    Pgm,
    Ppm,
}

impl HeatmapFormat {
    pub fn extension(self) -> &'static str {
        match self {
            HeatmapFormat::Csv => "csv",
            HeatmapFormat::Pgm => "pgm",
            HeatmapFormat::Ppm => "ppm",
        }
    }
}

impl fmt::Display for HeatmapFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

impl FromStr for HeatmapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(HeatmapFormat::Csv),
            "pgm" => Ok(HeatmapFormat::Pgm),
            "ppm" => Ok(HeatmapFormat::Ppm),
            _ => Err(Error::Config(format!("unknown heatmap format `{s}` (csv, pgm, ppm)"))),
        }
    }
}

/// Blue for the most negative value, white at zero, red for the most
/// positive, with one scale for both signs.
pub fn diverging_rgb(v: f64, max_abs: f64) -> [u8; 3] {
    let t = if max_abs > 0.0 { (v / max_abs).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = |x: f64| (255.0 * (1.0 - x.abs())).round() as u8;
    if t < 0.0 {
        [fade(t), fade(t), 255]
    } else {
        [255, fade(t), fade(t)]
    }
}

fn gray_levels(values: &[f64]) -> Vec<u8> {
    let mut v = values.to_vec();
    min_max_normalize(&mut v);
    v.iter().map(|x| (x * 255.0).round() as u8).collect()
}

pub fn write_heatmap(map: &Grid, format: HeatmapFormat, mut w: impl Write) -> Result<()> {
    if let Some(bad) = map.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: format!("heatmap value {bad}"),
            step: 0,
        });
    }
    match format {
        HeatmapFormat::Csv => {
            for row in map.data.chunks(map.cols) {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(w, "{}", line.join(","))?;
            }
        }
        HeatmapFormat::Pgm => {
            write!(w, "P5\n{} {}\n255\n", map.cols, map.rows)?;
            w.write_all(&gray_levels(&map.data))?;
        }
        HeatmapFormat::Ppm => {
            write!(w, "P6\n{} {}\n255\n", map.cols, map.rows)?;
            let max_abs = map.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for &v in &map.data {
                w.write_all(&diverging_rgb(v, max_abs))?;
            }
        }
    }
    Ok(())
}

pub fn export_heatmap(map: &Grid, path: impl AsRef<Path>, format: HeatmapFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_heatmap(map, format, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Parses a heatmap CSV back into a grid.
pub fn read_csv(path: impl AsRef<Path>) -> Result<Grid> {
    let text = std::fs::read_to_string(path)?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for line in text.lines().filter(|l| !l.is_empty()) {
        let vals = line
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad heatmap value `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        if *cols.get_or_insert(vals.len()) != vals.len() {
            return Err(Error::Format("ragged heatmap CSV".into()));
        }
        data.extend(vals);
        rows += 1;
    }
    Grid::new(rows, cols.unwrap_or(0), data)
}

/// Header length of the binary PGM/PPM files written here.
pub fn pnm_header_len(rows: usize, cols: usize) -> usize {
    format!("P6\n{cols} {rows}\n255\n").len()
}
