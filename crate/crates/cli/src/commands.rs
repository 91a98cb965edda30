use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use gsv_core::codec::CodecId;
use gsv_core::config::{EncodeConfig, Grouping};
use gsv_core::container::{write_atomic, ContainerIndex, Manifest, MAGIC};
use gsv_core::gaussian::{Aabb, GaussianSet};
use gsv_core::metrics::{bd_psnr, bdbr, psnr, RateUnit, RdCurve, RdPoint};
use gsv_core::pipeline::{decode_file, encode_sequence, DecodedSequence};
use gsv_core::quant::FlattenOrder;
use gsv_core::rate::LossWeights;
use gsv_core::render::{render_progressive, render_set, Camera, Image};
use gsv_core::splat_io::{encode_splat_points, load_splat_points};
use gsv_core::synth::{gen_synthetic_scene, SceneSpec};
use gsv_stream::{client_play_blocking, resolve_port, ClientConfig, Policy, SegmentServer, StreamError};
use serde::Serialize;

use crate::error::{core, io, CliError};
use crate::{AnalyzeArgs, CodecArg, DecodeArgs, EncodeArgs, OrderArg, PlayArgs, RenderArgs, ServeArgs, SynthArgs};

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io(dir))?;
    }
    write_atomic(path, bytes).map_err(io(path))
}

fn frame_name(t: usize, ext: &str) -> String {
    format!("frame_{t:04}.{ext}")
}

fn write_frames(dir: &Path, frames: &[GaussianSet]) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    for (t, f) in frames.iter().enumerate() {
        let bytes = encode_splat_points(f, 0).map_err(core)?;
        write_file(&dir.join(frame_name(t, "splat")), &bytes)?;
    }
    Ok(())
}

fn input_frames(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(io(p))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "splat"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(CliError::Usage(format!("{}: no .splat files", p.display())));
            }
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn encode_config(a: &EncodeArgs) -> Result<EncodeConfig, CliError> {
    let grouping = match a.grouping.as_str() {
        "adaptive" => Grouping::Adaptive,
        n => Grouping::Fixed(
            n.parse()
                .map_err(|_| CliError::Usage(format!("--grouping {n:?}: expected `adaptive` or a frame count")))?,
        ),
    };
    let cfg = EncodeConfig {
        layers: a.layers,
        layer_fractions: a.layer_fractions.clone(),
        lambda_psi: a.lambda_psi,
        tau_mu: a.tau_mu,
        sh_degree: a.sh_degree,
        pos_bits: a.pos_bits,
        wide_position_extent: a.wide_position_extent,
        codec: match a.codec {
            CodecArg::Raw => CodecId::Raw,
            CodecArg::Reference => CodecId::Reference,
        },
        prune_fraction: a.prune_fraction,
        grouping,
        flatten_order: match a.flatten_order {
            OrderArg::Significance => FlattenOrder::Significance,
            OrderArg::Morton => FlattenOrder::Morton,
        },
        fps_num: a.fps_num,
        fps_den: a.fps_den,
        seed: a.seed,
        estimate_rates: a.estimate_rates,
        loss: LossWeights::with_layers(a.layers.max(1)),
    };
    cfg.validate().map_err(|m| core(gsv_core::Error::Config(m)))?;
    Ok(cfg)
}

#[derive(Serialize)]
struct ReportFile<'a> {
    container: String,
    manifest: String,
    inputs: Vec<String>,
    layers: usize,
    lambda_psi: f64,
    tau_mu: f64,
    prune_fraction: f64,
    codec: u8,
    seed: u64,
    #[serde(flatten)]
    report: &'a gsv_core::pipeline::EncodeReport,
}

pub fn encode(a: EncodeArgs) -> Result<(), CliError> {
    let cfg = encode_config(&a)?;
    let paths = input_frames(&a.input)?;
    let frames = paths
        .iter()
        .map(|p| load_splat_points(p).map_err(core))
        .collect::<Result<Vec<_>, _>>()?;
    let enc = encode_sequence(&frames, &cfg)?;
    let bytes = enc.to_bytes()?;
    write_file(&a.output, &bytes)?;

    let index = ContainerIndex::from_bytes(&bytes).map_err(core)?;
    let url = a.output.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let manifest_path = a
        .manifest
        .clone()
        .unwrap_or_else(|| a.output.with_file_name("manifest.json"));
    write_file(&manifest_path, Manifest::from_index(&index, &url).to_json().as_bytes())?;

    let report_path = a.report.clone().unwrap_or_else(|| {
        let mut name = a.output.file_stem().unwrap_or_default().to_os_string();
        name.push(".report.json");
        a.output.with_file_name(name)
    });
    let report = ReportFile {
        container: a.output.display().to_string(),
        manifest: manifest_path.display().to_string(),
        inputs: paths.iter().map(|p| p.display().to_string()).collect(),
        layers: cfg.layers,
        lambda_psi: cfg.lambda_psi,
        tau_mu: cfg.tau_mu,
        prune_fraction: cfg.prune_fraction,
        codec: cfg.codec as u8,
        seed: cfg.seed,
        report: &enc.report,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&report_path, json.as_bytes())?;
    println!(
        "encoded {} frames, {} group(s): {} bytes ({} payload) -> {}",
        enc.report.frames,
        enc.report.groups.len(),
        enc.report.file_bytes,
        enc.report.payload_bytes,
        a.output.display()
    );
    Ok(())
}

fn decode_all(path: &Path, layers: Option<usize>) -> Result<DecodedSequence, CliError> {
    let l = match layers {
        Some(l) => l,
        None => {
            let mut f = std::fs::File::open(path).map_err(io(path))?;
            ContainerIndex::read_from(&mut f).map_err(core)?.layers()
        }
    };
    Ok(decode_file(path, l)?)
}

pub fn decode(a: DecodeArgs) -> Result<(), CliError> {
    let seq = decode_all(&a.input, a.layers)?;
    let frames = seq.frames()?;
    write_frames(&a.output, &frames)?;
    println!(
        "decoded {} frames at l={} -> {}",
        frames.len(),
        seq.layers_read,
        a.output.display()
    );
    Ok(())
}

/// Camera on the -z side of the scene looking at its center, framing the bounds.
pub fn default_camera(bounds: &Aabb, width: usize, height: usize) -> Camera {
    let c: [f64; 3] = std::array::from_fn(|k| (bounds.min[k] as f64 + bounds.max[k] as f64) / 2.0);
    let r = (0..3)
        .map(|k| (bounds.max[k] as f64 - bounds.min[k] as f64).powi(2))
        .sum::<f64>()
        .sqrt()
        .max(1e-3)
        / 2.0;
    let eye = [c[0], c[1] - 0.5 * r, c[2] - 2.6 * r];
    Camera::look_at(eye, c, [0.0, -1.0, 0.0], 50.0, width, height)
}

fn bounds_of(header_bounds: [f32; 6]) -> Aabb {
    Aabb {
        min: [header_bounds[0], header_bounds[1], header_bounds[2]],
        max: [header_bounds[3], header_bounds[4], header_bounds[5]],
    }
}

fn load_camera(path: Option<&Path>, bounds: &Aabb, width: usize, height: usize) -> Result<Camera, CliError> {
    match path {
        Some(p) => Ok(Camera::from_json(&std::fs::read_to_string(p).map_err(io(p))?).map_err(core)?),
        None => Ok(default_camera(bounds, width, height)),
    }
}

fn is_container(path: &Path) -> Result<bool, CliError> {
    let mut head = [0u8; 4];
    let mut f = std::fs::File::open(path).map_err(io(path))?;
    let n = std::io::Read::read(&mut f, &mut head).map_err(io(path))?;
    Ok(n == 4 && &head == MAGIC)
}

pub fn render(a: RenderArgs) -> Result<(), CliError> {
    let img = if is_container(&a.input)? {
        let seq = decode_all(&a.input, a.layers)?;
        let cam = load_camera(a.camera.as_deref(), &bounds_of(seq.header.bounds), a.width, a.height)?;
        let (g, t) = seq.locate(a.frame).ok_or_else(|| {
            core(gsv_core::Error::Input(format!(
                "frame {} beyond {} frames",
                a.frame,
                seq.frame_count()
            )))
        })?;
        let group = &seq.groups[g];
        render_progressive(&group.keyframe, seq.layers_read, &group.deltas, t, &cam).map_err(core)?
    } else {
        if a.layers.is_some() || a.frame != 0 {
            return Err(CliError::Usage("--layers and --frame apply to .gsv input only".into()));
        }
        let set = load_splat_points(&a.input).map_err(core)?;
        let cam = load_camera(a.camera.as_deref(), &set.bounds(), a.width, a.height)?;
        render_set(&set, &cam)
    };
    write_file(&a.output, &img.to_ppm())?;
    Ok(())
}

pub fn serve(a: ServeArgs) -> Result<(), CliError> {
    let port = resolve_port(a.port)?;
    let server = SegmentServer::open(&a.input, SocketAddr::new(a.host, port))?;
    println!("listening on {}", server.base_url());
    let _ = std::io::stdout().flush();
    server.wait();
    Ok(())
}

pub fn play(a: PlayArgs) -> Result<(), CliError> {
    let cfg = ClientConfig {
        policy: match a.layers {
            Some(l) => Policy::Fixed(l),
            None => Policy::Auto { safety: a.safety },
        },
        cap_bps: a.cap_bps,
        ..Default::default()
    };
    let log = client_play_blocking(&a.url, &cfg)?;
    let json = serde_json::to_string_pretty(&log).expect("log serializes");
    match &a.output {
        Some(p) => write_file(p, json.as_bytes())?,
        None => println!("{json}"),
    }
    match log.error {
        Some(e) => Err(StreamError::Protocol(format!("playback stopped early: {e}")).into()),
        None => Ok(()),
    }
}

struct GroundTruth {
    dir: PathBuf,
    camera: Camera,
}

impl GroundTruth {
    fn image(&self, t: usize) -> Result<Image, CliError> {
        let ppm = self.dir.join(frame_name(t, "ppm"));
        if ppm.exists() {
            return Image::load(&ppm).map_err(core);
        }
        let splat = self.dir.join(frame_name(t, "splat"));
        if splat.exists() {
            return Ok(render_set(&load_splat_points(&splat).map_err(core)?, &self.camera));
        }
        Err(CliError::Usage(format!("{}: no ground truth for frame {t}", self.dir.display())))
    }
}

fn mean_psnr(frames: &[GaussianSet], gt: &[Image], cam: &Camera) -> Result<f64, CliError> {
    let mut sum = 0.0;
    for (f, g) in frames.iter().zip(gt) {
        sum += psnr(g, &render_set(f, cam)).map_err(core)?;
    }
    Ok(sum / frames.len() as f64)
}

pub fn analyze(a: AnalyzeArgs) -> Result<(), CliError> {
    let mut specs = Vec::new();
    for c in &a.curves {
        let (name, paths) = c
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--curve {c:?}: expected NAME=path[,path...]")))?;
        let paths: Vec<PathBuf> = paths.split(',').filter(|p| !p.is_empty()).map(PathBuf::from).collect();
        if name.is_empty() || paths.is_empty() {
            return Err(CliError::Usage(format!("--curve {c:?}: expected NAME=path[,path...]")));
        }
        specs.push((name.to_string(), paths));
    }

    let first = &specs[0].1[0];
    let header = ContainerIndex::read_from(&mut std::fs::File::open(first).map_err(io(first))?)
        .map_err(core)?
        .header;
    let camera = load_camera(a.camera.as_deref(), &bounds_of(header.bounds), a.width, a.height)?;
    let gt = GroundTruth {
        dir: a.gt.clone(),
        camera: camera.clone(),
    };
    let mut gt_images: Vec<Image> = Vec::new();

    let mut curves = Vec::new();
    for (name, paths) in &specs {
        let mut points = Vec::new();
        let mut add = |seq: &DecodedSequence, payload: u64, gt_images: &mut Vec<Image>| -> Result<(), CliError> {
            let mut frames = seq.frames()?;
            if let Some(n) = a.frames {
                frames.truncate(n);
            }
            while gt_images.len() < frames.len() {
                gt_images.push(gt.image(gt_images.len())?);
            }
            points.push(RdPoint {
                rate: payload as f64 / seq.frame_count() as f64,
                psnr: mean_psnr(&frames, gt_images, &camera)?,
            });
            Ok(())
        };
        if paths.len() == 1 {
            let mut f = std::fs::File::open(&paths[0]).map_err(io(&paths[0]))?;
            let index = ContainerIndex::read_from(&mut f).map_err(core)?;
            for l in 1..=index.layers() {
                let seq = decode_file(&paths[0], l)?;
                let payload: u64 = index.groups.iter().map(|g| (0..l).map(|k| g.layer_bytes(k)).sum::<u64>()).sum();
                add(&seq, payload, &mut gt_images)?;
            }
        } else {
            for p in paths {
                let mut f = std::fs::File::open(p).map_err(io(p))?;
                let index = ContainerIndex::read_from(&mut f).map_err(core)?;
                add(&decode_file(p, index.layers())?, index.payload_bytes(), &mut gt_images)?;
            }
        }
        points.sort_by(|x, y| x.rate.total_cmp(&y.rate));
        points.dedup_by(|x, y| x.rate == y.rate);
        let curve = RdCurve::new(points, RateUnit::BytesPerFrame).map_err(core)?;
        write_file(&a.output.join(format!("{name}.csv")), curve.to_csv().as_bytes())?;
        curves.push((name.clone(), curve));
    }

    let mut table = String::from("anchor,test,bd_psnr_db,bdbr_percent\n");
    let (anchor_name, anchor) = &curves[0];
    for (name, curve) in &curves {
        let d = bd_psnr(anchor, curve).map_err(core)?;
        let r = bdbr(anchor, curve).map_err(core)?;
        table.push_str(&format!("{anchor_name},{name},{d},{r}\n"));
    }
    write_file(&a.output.join("bd.csv"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut spec: SceneSpec = match &a.spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).map_err(io(p))?)
            .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
        None => SceneSpec::default(),
    };
    if let Some(v) = a.count {
        spec.count = v;
    }
    if let Some(v) = a.frames {
        spec.frames = v;
    }
    if let Some(v) = a.sh_degree {
        spec.sh_degree = v;
    }
    if let Some(v) = a.motion_amplitude {
        spec.motion_amplitude = v;
    }
    if let Some(v) = a.rotation_amplitude {
        spec.rotation_amplitude = v;
    }
    if let Some(v) = a.residual_amplitude {
        spec.residual_amplitude = v;
    }
    let frames = gen_synthetic_scene(&spec, a.seed).map_err(core)?;
    write_frames(&a.output, &frames)?;
    #[derive(Serialize)]
    struct Scene<'a> {
        seed: u64,
        spec: &'a SceneSpec,
    }
    let json = serde_json::to_string_pretty(&Scene { seed: a.seed, spec: &spec }).expect("spec serializes");
    write_file(&a.output.join("scene.json"), json.as_bytes())?;
    println!("wrote {} frames of {} Gaussians -> {}", frames.len(), spec.count, a.output.display());
    Ok(())
}
