//! Out-of-process diffusion backend.
//!
//! The adapter bridges the model-dependent operations (`encode`, `decode`,
//! `predict`) to a child process; schedule math and the sampler loop are
//! composed host-side from `predict` exactly as for in-process backends.
//! Each call writes a request tensor archive, invokes the configured command
//! as `<cmd...> <op> <request> <response>`, and reads the response archive:
//!
//! | op        | request arrays                         | response arrays |
//! |-----------|----------------------------------------|-----------------|
//! | `encode`  | `image`                                | `latent`        |
//! | `decode`  | `latent`                               | `image`         |
//! | `predict` | `z`, `t` (i64), `prompt`, `mask`       | `noise`         |
//!
//! External backends cannot expose reverse-mode products across the process
//! boundary, so gradient-based refinement reports `UnsupportedBackend`.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array3, ArrayD};

use crate::archive::{read_archive, write_archive, Archive, TensorData};
use crate::error::{Error, Result};

use super::{InpaintMask, NoisePredictor, PromptFeatures, Vae};

static CALL_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Client side of the protocol.
pub struct ExternalDiffusion {
    command: Vec<String>,
    workdir: PathBuf,
    latent_channels: usize,
    latent_factor: usize,
}

impl ExternalDiffusion {
    /// `command` is split on whitespace; `latent_factor` is the spatial
    /// downsampling ratio the remote VAE applies.
    pub fn new(command: &str, latent_channels: usize, latent_factor: usize) -> Result<Self> {
        let parts: Vec<String> = command.split_whitespace().map(String::from).collect();
        if parts.is_empty() {
            return Err(Error::BackendUnavailable("empty external command".into()));
        }
        Ok(ExternalDiffusion {
            command: parts,
            workdir: std::env::temp_dir(),
            latent_channels,
            latent_factor,
        })
    }

    fn call(&self, op: &str, request: &Archive) -> Result<Archive> {
        let id = CALL_COUNTER.fetch_add(1, Ordering::Relaxed);
        let pid = std::process::id();
        let req_path = self.workdir.join(format!("synood-req-{pid}-{id}.synd"));
        let resp_path = self.workdir.join(format!("synood-resp-{pid}-{id}.synd"));
        write_archive(&req_path, request)?;
        let status = Command::new(&self.command[0])
            .args(&self.command[1..])
            .arg(op)
            .arg(&req_path)
            .arg(&resp_path)
            .status()
            .map_err(|e| Error::BackendUnavailable(format!("spawn failed: {e}")))?;
        if !status.success() {
            let _ = std::fs::remove_file(&req_path);
            return Err(Error::BackendUnavailable(format!(
                "external backend exited with {status}"
            )));
        }
        let response = read_archive(&resp_path);
        let _ = std::fs::remove_file(&req_path);
        let _ = std::fs::remove_file(&resp_path);
        response
    }
}

fn to_tensor(a: &Array3<f64>) -> TensorData {
    TensorData::from_f64(&a.clone().into_dyn())
}

fn to_array3(data: ArrayD<f64>, context: &'static str) -> Result<Array3<f64>> {
    data.into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::ShapeMismatch {
            expected: vec![3],
            got: vec![],
            context,
        })
}

impl Vae for ExternalDiffusion {
    fn encode(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        let mut req = Archive::new();
        req.push("image", to_tensor(image))?;
        let resp = self.call("encode", &req)?;
        to_array3(resp.require_f64("latent")?, "external encode")
    }

    fn decode(&self, latent: &Array3<f64>) -> Result<Array3<f64>> {
        let mut req = Archive::new();
        req.push("latent", to_tensor(latent))?;
        let resp = self.call("decode", &req)?;
        to_array3(resp.require_f64("image")?, "external decode")
    }

    fn decode_vjp(&self, _latent: &Array3<f64>, _cotangent: &Array3<f64>) -> Result<Array3<f64>> {
        Err(Error::UnsupportedBackend("external".into()))
    }

    fn latent_shape(&self, image_shape: (usize, usize, usize)) -> (usize, usize, usize) {
        (
            self.latent_channels,
            image_shape.1 / self.latent_factor,
            image_shape.2 / self.latent_factor,
        )
    }

    fn reconstruction_bound(&self) -> f64 {
        f64::INFINITY
    }

    fn is_differentiable(&self) -> bool {
        false
    }

    fn name(&self) -> &'static str {
        "external"
    }
}

impl NoisePredictor for ExternalDiffusion {
    fn predict(
        &self,
        z: &Array3<f64>,
        t: usize,
        prompt: &PromptFeatures,
        mask: &InpaintMask,
    ) -> Result<Array3<f64>> {
        let mut req = Archive::new();
        req.push("z", to_tensor(z))?;
        req.push(
            "t",
            TensorData::I64(ArrayD::from_elem(vec![1], t as i64)),
        )?;
        req.push(
            "prompt",
            TensorData::from_f64(&prompt.values.clone().into_dyn()),
        )?;
        req.push(
            "mask",
            TensorData::from_f64(&mask.values().clone().into_dyn()),
        )?;
        let resp = self.call("predict", &req)?;
        to_array3(resp.require_f64("noise")?, "external predict")
    }

    fn vjp(
        &self,
        _z: &Array3<f64>,
        _t: usize,
        _prompt: &PromptFeatures,
        _mask: &InpaintMask,
        _cotangent: &Array3<f64>,
    ) -> Result<Array3<f64>> {
        Err(Error::UnsupportedBackend("external".into()))
    }

    fn is_differentiable(&self) -> bool {
        false
    }

    fn name(&self) -> &'static str {
        "external"
    }
}

/// Server side: handle one request file with in-process backends. Host
/// binaries expose this to turn themselves into external backends.
pub fn serve_request(
    op: &str,
    request_path: &Path,
    response_path: &Path,
    vae: &dyn Vae,
    predictor: &dyn NoisePredictor,
) -> Result<()> {
    let request = read_archive(request_path)?;
    let mut response = Archive::new();
    match op {
        "encode" => {
            let image = to_array3(request.require_f64("image")?, "serve encode")?;
            response.push("latent", to_tensor(&vae.encode(&image)?))?;
        }
        "decode" => {
            let latent = to_array3(request.require_f64("latent")?, "serve decode")?;
            response.push("image", to_tensor(&vae.decode(&latent)?))?;
        }
        "predict" => {
            let z = to_array3(request.require_f64("z")?, "serve predict")?;
            let t = request.require("t")?.as_i64()?[0] as usize;
            let prompt = PromptFeatures::new(
                request
                    .require_f64("prompt")?
                    .into_dimensionality::<ndarray::Ix1>()
                    .map_err(|_| Error::MalformedHeader("prompt must be 1-D".into()))?,
            );
            let mask = InpaintMask::new(
                request
                    .require_f64("mask")?
                    .into_dimensionality::<ndarray::Ix2>()
                    .map_err(|_| Error::MalformedHeader("mask must be 2-D".into()))?,
            )?;
            response.push("noise", to_tensor(&predictor.predict(&z, t, &prompt, &mask)?))?;
        }
        other => {
            return Err(Error::BackendUnavailable(format!(
                "unknown external op `{other}`"
            )))
        }
    }
    write_archive(response_path, &response)
}
