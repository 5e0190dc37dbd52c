//! Adapter that hosts a real pretrained model in a sidecar process. The
//! sidecar speaks one JSON object per line over stdin/stdout; this side owns
//! the process lifetime and serializes every call through one mutex, so a
//! handle is safe to share but never runs two requests at once.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};

use super::{BackendDescriptor, BackendKind, DecodeParams, LmBackend};

/// How to launch the sidecar and which model it should load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub kind: BackendKind,
    /// Model identifier the sidecar resolves (hub name or local path).
    pub model_id: String,
    /// Argv for the sidecar, e.g. ["python3", "scripts/hf_backend.py"].
    pub command: Vec<String>,
    /// Exported to the child as PROMPTMIX_CACHE_DIR when set.
    pub cache_dir: Option<PathBuf>,
}

/// Row-major matrix as it crosses the wire.
#[derive(Debug, Serialize, Deserialize)]
struct WireMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl WireMatrix {
    fn from_array(a: &Array2<f64>) -> WireMatrix {
        WireMatrix { rows: a.nrows(), cols: a.ncols(), data: a.iter().copied().collect() }
    }

    fn into_array(self) -> Result<Array2<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Backend(format!(
                "wire matrix claims {}x{} but carries {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Array2::from_shape_vec((self.rows, self.cols), self.data)
            .map_err(|e| Error::Backend(format!("wire matrix shape: {e}")))
    }
}

#[derive(Deserialize)]
struct Envelope {
    ok: bool,
    #[serde(default)]
    result: Value,
    #[serde(default)]
    error: Option<String>,
}

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Pipe {
    fn call(&mut self, request: &Value) -> Result<Value> {
        let mut line = serde_json::to_string(request)
            .map_err(|e| Error::Backend(format!("request encode: {e}")))?;
        line.push('\n');
        self.stdin
            .write_all(line.as_bytes())
            .and_then(|_| self.stdin.flush())
            .map_err(|e| Error::Backend(format!("sidecar stdin: {e}")))?;
        let mut reply = String::new();
        let n = self
            .stdout
            .read_line(&mut reply)
            .map_err(|e| Error::Backend(format!("sidecar stdout: {e}")))?;
        if n == 0 {
            return Err(Error::Backend("sidecar closed its output stream".into()));
        }
        let envelope: Envelope = serde_json::from_str(reply.trim_end())
            .map_err(|e| Error::Backend(format!("malformed sidecar reply: {e}")))?;
        if !envelope.ok {
            return Err(Error::Backend(
                envelope.error.unwrap_or_else(|| "sidecar reported an unnamed failure".into()),
            ));
        }
        Ok(envelope.result)
    }

    fn reap(&mut self) {
        let _ = self.stdin.write_all(b"{\"op\":\"shutdown\"}\n");
        let _ = self.stdin.flush();
        for _ in 0..50 {
            if matches!(self.child.try_wait(), Ok(Some(_))) {
                return;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

pub struct RemoteBackend {
    pipe: Mutex<Pipe>,
    descriptor: BackendDescriptor,
}

impl RemoteBackend {
    /// Launches the sidecar and runs the init handshake. The descriptor the
    /// sidecar returns is held for the lifetime of the handle.
    pub fn spawn(config: &RemoteConfig) -> Result<RemoteBackend> {
        let (program, args) = config
            .command
            .split_first()
            .ok_or_else(|| Error::Argument("remote backend command is empty".into()))?;
        let mut cmd = Command::new(program);
        cmd.args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::inherit());
        if let Some(dir) = &config.cache_dir {
            cmd.env("PROMPTMIX_CACHE_DIR", dir);
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| Error::Backend(format!("failed to launch sidecar '{program}': {e}")))?;
        let stdin = child.stdin.take().expect("stdin was piped");
        let stdout = BufReader::new(child.stdout.take().expect("stdout was piped"));
        let mut pipe = Pipe { child, stdin, stdout };
        let handshake = pipe
            .call(&json!({ "op": "init", "kind": config.kind, "model_id": config.model_id }))
            .and_then(|v| {
                serde_json::from_value::<BackendDescriptor>(v)
                    .map_err(|e| Error::Backend(format!("bad init reply: {e}")))
            });
        match handshake {
            Ok(descriptor) => Ok(RemoteBackend { pipe: Mutex::new(pipe), descriptor }),
            Err(e) => {
                let _ = pipe.child.kill();
                let _ = pipe.child.wait();
                Err(e)
            }
        }
    }

    fn call(&self, request: Value) -> Result<Value> {
        let mut pipe =
            self.pipe.lock().map_err(|_| Error::Backend("sidecar mutex poisoned".into()))?;
        pipe.call(&request)
    }
}

impl Drop for RemoteBackend {
    fn drop(&mut self) {
        if let Ok(mut pipe) = self.pipe.lock() {
            pipe.reap();
        }
    }
}

impl LmBackend for RemoteBackend {
    fn descriptor(&self) -> BackendDescriptor {
        self.descriptor.clone()
    }

    fn embed_tokens(&self, text: &str) -> Result<Array2<f64>> {
        let result = self.call(json!({ "op": "embed", "text": text }))?;
        let wire: WireMatrix = serde_json::from_value(result)
            .map_err(|e| Error::Backend(format!("bad embed reply: {e}")))?;
        let matrix = wire.into_array()?;
        if matrix.nrows() == 0 {
            return Ok(Array2::zeros((0, self.descriptor.embed_dim)));
        }
        if matrix.ncols() != self.descriptor.embed_dim {
            return Err(Error::Backend(format!(
                "sidecar embedding width {} does not match descriptor {}",
                matrix.ncols(),
                self.descriptor.embed_dim
            )));
        }
        Ok(matrix)
    }

    fn loss_and_input_grads(
        &self,
        soft_block: &Array2<f64>,
        text_suffix: &str,
        target: &str,
    ) -> Result<(f64, Array2<f64>)> {
        let result = self.call(json!({
            "op": "loss_grads",
            "soft_block": WireMatrix::from_array(soft_block),
            "suffix": text_suffix,
            "target": target,
        }))?;
        #[derive(Deserialize)]
        struct Reply {
            loss: f64,
            grad: WireMatrix,
        }
        let reply: Reply = serde_json::from_value(result)
            .map_err(|e| Error::Backend(format!("bad loss_grads reply: {e}")))?;
        if !reply.loss.is_finite() {
            return Err(Error::Numeric(format!("sidecar loss is not finite: {}", reply.loss)));
        }
        let grad = reply.grad.into_array()?;
        if grad.dim() != soft_block.dim() {
            return Err(Error::Backend(format!(
                "sidecar gradient shape {:?} does not match soft block {:?}",
                grad.dim(),
                soft_block.dim()
            )));
        }
        Ok((reply.loss, grad))
    }

    fn generate(
        &self,
        soft_block: &Array2<f64>,
        text_suffix: &str,
        params: &DecodeParams,
    ) -> Result<Vec<String>> {
        params.validate()?;
        let result = self.call(json!({
            "op": "generate",
            "soft_block": WireMatrix::from_array(soft_block),
            "suffix": text_suffix,
            "params": params,
        }))?;
        let texts: Vec<String> = serde_json::from_value(result)
            .map_err(|e| Error::Backend(format!("bad generate reply: {e}")))?;
        if texts.len() != params.num_return_sequences {
            return Err(Error::Backend(format!(
                "sidecar returned {} sequences, wanted {}",
                texts.len(),
                params.num_return_sequences
            )));
        }
        Ok(texts)
    }

    fn param_checksum(&self) -> Result<u64> {
        let result = self.call(json!({ "op": "checksum" }))?;
        // Sent as a hex string: JSON numbers cannot carry a full u64.
        let hex: String = serde_json::from_value(result)
            .map_err(|e| Error::Backend(format!("bad checksum reply: {e}")))?;
        u64::from_str_radix(hex.trim_start_matches("0x"), 16)
            .map_err(|e| Error::Backend(format!("bad checksum value '{hex}': {e}")))
    }
}
