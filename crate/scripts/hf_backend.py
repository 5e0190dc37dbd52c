#!/usr/bin/env python3
"""Sidecar that hosts a Hugging Face model behind the teacher line protocol.

Reads one JSON request per stdin line and writes one JSON reply per stdout
line: {"ok": true, "result": ...} on success, {"ok": false, "error": "..."}
on failure. Matrices cross the wire row-major as
{"rows": R, "cols": C, "data": [R*C floats]}.

Ops:
  init        {"op", "kind": "seq2seq"|"causal", "model_id"}
              -> {"name", "embed_dim", "max_input_rows", "kind"}
  embed       {"op", "text"} -> matrix of input-embedding rows, one per token
  loss_grads  {"op", "soft_block": matrix, "suffix", "target"}
              -> {"loss": float, "grad": matrix}  (grad w.r.t. the soft block)
  generate    {"op", "soft_block": matrix, "suffix", "params"} -> [str, ...]
  checksum    {"op"} -> "0x..." hex digest over the frozen weights
  shutdown    exits without replying

The model is loaded frozen; gradient ever flows only to the caller's soft
block. Set PROMPTMIX_CACHE_DIR to redirect the hub download cache and
PROMPTMIX_DEVICE to pin a device (defaults to cuda when available).

Requires: torch, transformers. Both are imported lazily at init so the
handshake can report a clean error when they are missing.
"""

import json
import os
import sys

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
MASK64 = 0xFFFFFFFFFFFFFFFF


def to_matrix(tensor):
    rows, cols = tensor.shape
    return {"rows": rows, "cols": cols, "data": tensor.reshape(-1).tolist()}


class Host:
    def __init__(self):
        self.torch = None
        self.model = None
        self.tokenizer = None
        self.kind = None
        self.device = None

    def require_model(self):
        if self.model is None:
            raise RuntimeError("init must be called before any other op")

    def init(self, kind, model_id):
        import torch
        from transformers import (
            AutoModelForCausalLM,
            AutoModelForSeq2SeqLM,
            AutoTokenizer,
        )

        if kind not in ("seq2seq", "causal"):
            raise ValueError("kind must be 'seq2seq' or 'causal', got %r" % kind)
        cache = os.environ.get("PROMPTMIX_CACHE_DIR")
        kwargs = {"cache_dir": cache} if cache else {}
        self.torch = torch
        self.kind = kind
        self.tokenizer = AutoTokenizer.from_pretrained(model_id, **kwargs)
        cls = AutoModelForSeq2SeqLM if kind == "seq2seq" else AutoModelForCausalLM
        self.model = cls.from_pretrained(model_id, torch_dtype=torch.float32, **kwargs)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        name = os.environ.get("PROMPTMIX_DEVICE")
        if name is None:
            name = "cuda" if torch.cuda.is_available() else "cpu"
        self.device = torch.device(name)
        self.model.to(self.device)

        dim = self.model.get_input_embeddings().embedding_dim
        limit = getattr(self.tokenizer, "model_max_length", 1024)
        # Some tokenizers report a sentinel near 2**63 meaning "unbounded".
        if not isinstance(limit, int) or limit > 1 << 20:
            limit = 1024
        return {
            "name": model_id,
            "embed_dim": dim,
            "max_input_rows": limit,
            "kind": kind,
        }

    def token_embeds(self, text):
        ids = self.tokenizer(
            text, add_special_tokens=False, return_tensors="pt"
        ).input_ids.to(self.device)
        return self.model.get_input_embeddings()(ids)[0]

    def soft_tensor(self, wire, requires_grad):
        torch = self.torch
        data = torch.tensor(wire["data"], dtype=torch.float32, device=self.device)
        soft = data.reshape(wire["rows"], wire["cols"])
        if requires_grad:
            soft.requires_grad_(True)
        return soft

    def embed(self, text):
        with self.torch.no_grad():
            vecs = self.token_embeds(text).to("cpu", self.torch.float64)
        return to_matrix(vecs)

    def loss_grads(self, wire, suffix, target):
        torch = self.torch
        soft = self.soft_tensor(wire, requires_grad=True)
        with torch.no_grad():
            sfx = self.token_embeds(suffix)
        if self.kind == "seq2seq":
            inputs = torch.cat([soft, sfx], dim=0).unsqueeze(0)
            mask = torch.ones(inputs.shape[:2], dtype=torch.long, device=self.device)
            labels = self.tokenizer(
                text_target=target, return_tensors="pt"
            ).input_ids.to(self.device)
            out = self.model(inputs_embeds=inputs, attention_mask=mask, labels=labels)
        else:
            tgt_ids = self.tokenizer(
                target, add_special_tokens=False, return_tensors="pt"
            ).input_ids.to(self.device)
            with torch.no_grad():
                tgt = self.model.get_input_embeddings()(tgt_ids)[0]
            inputs = torch.cat([soft, sfx, tgt], dim=0).unsqueeze(0)
            mask = torch.ones(inputs.shape[:2], dtype=torch.long, device=self.device)
            prefix = soft.shape[0] + sfx.shape[0]
            ignore = torch.full(
                (1, prefix), -100, dtype=torch.long, device=self.device
            )
            labels = torch.cat([ignore, tgt_ids], dim=1)
            out = self.model(inputs_embeds=inputs, attention_mask=mask, labels=labels)
        out.loss.backward()
        grad = soft.grad.detach().to("cpu", torch.float64)
        return {"loss": float(out.loss.detach().cpu()), "grad": to_matrix(grad)}

    def generate(self, wire, suffix, params):
        torch = self.torch
        with torch.no_grad():
            soft = self.soft_tensor(wire, requires_grad=False)
            sfx = self.token_embeds(suffix)
            inputs = torch.cat([soft, sfx], dim=0).unsqueeze(0)
            mask = torch.ones(inputs.shape[:2], dtype=torch.long, device=self.device)
            torch.manual_seed(params["seed"])
            pad = self.tokenizer.pad_token_id
            if pad is None:
                pad = self.tokenizer.eos_token_id
            out = self.model.generate(
                inputs_embeds=inputs,
                attention_mask=mask,
                do_sample=True,
                max_new_tokens=params["max_new_tokens"],
                temperature=params["temperature"],
                top_p=params["top_p"],
                num_return_sequences=params["num_return_sequences"],
                pad_token_id=pad,
            )
        # With inputs_embeds and no input_ids, both model families return
        # only generated ids, so decoding needs no prompt stripping.
        texts = self.tokenizer.batch_decode(out, skip_special_tokens=True)
        return [t.strip() for t in texts]

    def checksum(self):
        # FNV-1a over per-tensor statistics in name order. Not cryptographic;
        # detects any weight drift between calls, which is all the caller
        # checks.
        torch = self.torch
        digest = FNV_OFFSET

        def mix(data):
            nonlocal digest
            for byte in data:
                digest = ((digest ^ byte) * FNV_PRIME) & MASK64

        for name, param in sorted(self.model.state_dict().items()):
            t = param.detach().to("cpu", torch.float64)
            stats = (tuple(t.shape), float(t.sum()), float(t.abs().sum()))
            mix(name.encode())
            mix(repr(stats).encode())
        return "0x%016x" % digest


def main():
    # The protocol owns fd 1. Model libraries print progress bars and load
    # reports through sys.stdout, so give them stderr and keep a private
    # handle for replies.
    wire = sys.stdout
    sys.stdout = sys.stderr
    host = Host()
    for line in sys.stdin:
        line = line.strip()
        if not line:
            continue
        try:
            req = json.loads(line)
            op = req["op"]
            if op == "shutdown":
                return
            if op == "init":
                result = host.init(req["kind"], req["model_id"])
            elif op == "embed":
                host.require_model()
                result = host.embed(req["text"])
            elif op == "loss_grads":
                host.require_model()
                result = host.loss_grads(req["soft_block"], req["suffix"], req["target"])
            elif op == "generate":
                host.require_model()
                result = host.generate(req["soft_block"], req["suffix"], req["params"])
            elif op == "checksum":
                host.require_model()
                result = host.checksum()
            else:
                raise ValueError("unknown op %r" % op)
            reply = {"ok": True, "result": result}
        except Exception as exc:  # deliberate catch-all: the envelope is the error channel
            reply = {"ok": False, "error": "%s: %s" % (type(exc).__name__, exc)}
        wire.write(json.dumps(reply) + "\n")
        wire.flush()


if __name__ == "__main__":
    main()
