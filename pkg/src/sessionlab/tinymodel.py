"""Desk-scale decoder transformer with LoRA-adapted attention and Soft-MoE feed-forward blocks.

The base weights (embeddings, layer norms, attention projections, unembedding)
are frozen. Trainable tensors are the LoRA adapters on Q/K/V/O, the Soft-MoE
gates and experts, and a small classification head read from the last
position.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call, vmap

_DTYPES = {"float64": torch.float64, "float32": torch.float32}


@dataclass(frozen=True)
class TinyConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    max_seq: int = 128
    n_experts: int = 4
    expert_hidden: int = 128
    lora_rank: int = 16
    lora_alpha: float = 32.0
    lora_dropout: float = 0.10
    lambda_aux: float = 0.01
    n_classes: int = 2
    dtype: str = "float64"
    seed: int = 0
    gradient_checkpointing: bool = False

    def __post_init__(self):
        if self.gradient_checkpointing:
            raise NotImplementedError("gradient checkpointing is not implemented at this scale")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0 <= self.lora_rank <= self.d_model:
            raise ValueError("lora_rank must not exceed the adapted layer dimensions")
        if self.dtype not in _DTYPES:
            raise ValueError(f"dtype must be one of {sorted(_DTYPES)}")
        if self.n_experts < 1 or self.expert_hidden < 1:
            raise ValueError("need at least one expert with a non-empty hidden layer")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def to_dict(self) -> dict:
        return asdict(self)


class LoRALinear(nn.Module):
    """``x @ W + (alpha / r) * dropout(x) @ A @ B`` with ``W`` frozen and ``B`` zero-initialised."""

    def __init__(self, d_in: int, d_out: int, rank: int, alpha: float, dropout: float,
                 generator: torch.Generator, dtype=torch.float64,
                 adapter_generator: Optional[torch.Generator] = None):
        super().__init__()
        self.d_in, self.d_out, self.rank = d_in, d_out, rank
        w = torch.randn(d_in, d_out, generator=generator, dtype=dtype) / math.sqrt(d_in)
        self.weight = nn.Parameter(w, requires_grad=False)
        self.dropout = dropout
        if rank > 0:
            a = torch.randn(d_in, rank, generator=adapter_generator or generator, dtype=dtype) / math.sqrt(d_in)
            self.lora_A = nn.Parameter(a)
            self.lora_B = nn.Parameter(torch.zeros(rank, d_out, dtype=dtype))
            self.scale = alpha / rank
        else:
            self.lora_A = self.lora_B = None
            self.scale = 0.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.d_in:
            raise ValueError(f"expected last dimension {self.d_in}, got {tuple(x.shape)}")
        out = x @ self.weight
        if self.lora_A is not None:
            h = F.dropout(x, self.dropout, self.training)
            out = out + self.scale * ((h @ self.lora_A) @ self.lora_B)
        return out


def lora_forward(x: torch.Tensor, layer: LoRALinear) -> torch.Tensor:
    return layer(x)


def aux_loss_from_gates(gates: torch.Tensor, lambda_aux: float) -> torch.Tensor:
    """``lambda * E * sum_i m_i^2`` with ``m_i`` the mean gate weight of expert ``i``.

    For gates on the simplex this lies in ``[lambda, lambda * E]``: the lower
    bound exactly when mean routing is uniform, the upper when every token goes
    to the same single expert.
    """
    n_experts = gates.shape[-1]
    m = gates.mean(dim=0)
    return lambda_aux * n_experts * (m * m).sum()


class SoftMoE(nn.Module):
    """Token-wise softmax gate over experts; every expert runs on every token."""

    def __init__(self, d_model: int, n_experts: int, hidden: int, lambda_aux: float,
                 generator: torch.Generator, dtype=torch.float64):
        super().__init__()
        self.d_model, self.n_experts, self.lambda_aux = d_model, n_experts, lambda_aux
        self.gate = nn.Parameter(torch.randn(d_model, n_experts, generator=generator, dtype=dtype) * 0.02)
        self.w_in = nn.Parameter(torch.randn(n_experts, d_model, hidden, generator=generator, dtype=dtype)
                                 / math.sqrt(d_model))
        self.w_out = nn.Parameter(torch.randn(n_experts, hidden, d_model, generator=generator, dtype=dtype)
                                  / math.sqrt(hidden))

    def gates(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(x @ self.gate, dim=-1)

    def expert_outputs(self, x: torch.Tensor) -> torch.Tensor:
        """``(tokens, experts, d_model)``"""
        h = F.gelu(torch.einsum("td,edh->teh", x, self.w_in), approximate="none")
        return torch.einsum("teh,ehd->ted", h, self.w_out)

    def forward(self, x: torch.Tensor):
        if x.dim() != 2 or x.shape[1] != self.d_model:
            raise ValueError(f"expected (tokens, {self.d_model}), got {tuple(x.shape)}")
        g = self.gates(x)
        y = torch.einsum("te,ted->td", g, self.expert_outputs(x))
        return y, aux_loss_from_gates(g, self.lambda_aux)


def soft_moe_forward(x: torch.Tensor, block: SoftMoE):
    return block(x)


class _LayerNorm(nn.Module):
    def __init__(self, d: int, dtype):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d, dtype=dtype), requires_grad=False)
        self.bias = nn.Parameter(torch.zeros(d, dtype=dtype), requires_grad=False)

    def forward(self, x):
        return F.layer_norm(x, (x.shape[-1],), self.weight, self.bias, eps=1e-5)


class Block(nn.Module):
    def __init__(self, cfg: TinyConfig, gen: torch.Generator, adapter_gen: torch.Generator):
        super().__init__()
        dt, d = cfg.torch_dtype, cfg.d_model
        self.n_heads = cfg.n_heads
        self.ln1 = _LayerNorm(d, dt)
        self.ln2 = _LayerNorm(d, dt)
        lora = dict(rank=cfg.lora_rank, alpha=cfg.lora_alpha, dropout=cfg.lora_dropout, generator=gen, dtype=dt,
                    adapter_generator=adapter_gen)
        self.q = LoRALinear(d, d, **lora)
        self.k = LoRALinear(d, d, **lora)
        self.v = LoRALinear(d, d, **lora)
        self.o = LoRALinear(d, d, **lora)
        self.moe = SoftMoE(d, cfg.n_experts, cfg.expert_hidden, cfg.lambda_aux, gen, dt)

    def attention(self, x):
        t, d = x.shape
        hd = d // self.n_heads
        q = self.q(x).view(t, self.n_heads, hd).transpose(0, 1)
        k = self.k(x).view(t, self.n_heads, hd).transpose(0, 1)
        v = self.v(x).view(t, self.n_heads, hd).transpose(0, 1)
        scores = q @ k.transpose(1, 2) / math.sqrt(hd)
        mask = torch.ones(t, t, dtype=torch.bool).triu(1)
        scores = scores.masked_fill(mask, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.o(out.transpose(0, 1).reshape(t, d))

    def forward(self, x):
        x = x + self.attention(self.ln1(x))
        y, aux = self.moe(self.ln2(x))
        return x + y, aux


class TinyModel(nn.Module):
    def __init__(self, cfg: TinyConfig):
        super().__init__()
        self.cfg = cfg
        # adapters draw from their own stream so the base weights do not depend on the rank
        gen = torch.Generator().manual_seed(cfg.seed)
        adapter_gen = torch.Generator().manual_seed(cfg.seed + 0x5EED)
        dt, d = cfg.torch_dtype, cfg.d_model
        self.tok_emb = nn.Parameter(torch.randn(cfg.vocab_size, d, generator=gen, dtype=dt) * 0.5,
                                    requires_grad=False)
        self.pos_emb = nn.Parameter(torch.randn(cfg.max_seq, d, generator=gen, dtype=dt) * 0.1,
                                    requires_grad=False)
        self.blocks = nn.ModuleList(Block(cfg, gen, adapter_gen) for _ in range(cfg.n_layers))
        self.ln_f = _LayerNorm(d, dt)
        self.unembed = nn.Parameter(torch.randn(d, cfg.vocab_size, generator=gen, dtype=dt) / math.sqrt(d),
                                    requires_grad=False)
        self.head = nn.Linear(d, cfg.n_classes, dtype=dt)
        with torch.no_grad():
            self.head.weight.copy_(torch.randn(cfg.n_classes, d, generator=gen, dtype=dt) * 0.02)
            self.head.bias.zero_()

    def _check_ids(self, token_ids) -> torch.Tensor:
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.dim() != 1 or ids.numel() == 0:
            raise ValueError("token_ids must be a non-empty 1-D sequence")
        if ids.numel() > self.cfg.max_seq:
            raise ValueError(f"sequence length {ids.numel()} exceeds max_seq {self.cfg.max_seq}")
        if int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size:
            raise ValueError(f"token ids must lie in [0, {self.cfg.vocab_size})")
        return ids

    def hidden(self, token_ids):
        """Final hidden states ``(T, d_model)`` and the summed auxiliary loss."""
        ids = self._check_ids(token_ids)
        x = self.tok_emb[ids] + self.pos_emb[: ids.numel()]
        aux = torch.zeros((), dtype=x.dtype)
        for block in self.blocks:
            x, a = block(x)
            aux = aux + a
        return self.ln_f(x), aux

    def forward(self, token_ids):
        h, aux = self.hidden(token_ids)
        return h @ self.unembed, aux

    def classify(self, token_ids):
        h, aux = self.hidden(token_ids)
        return self.head(h[-1]), aux

    def trainable_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]


def build_model(cfg: Optional[TinyConfig] = None) -> TinyModel:
    return TinyModel(cfg or TinyConfig())


def forward(model: TinyModel, token_ids) -> torch.Tensor:
    """Next-token logits ``(T, vocab_size)``."""
    return model(token_ids)[0]


def lm_loss(model: TinyModel, token_ids) -> torch.Tensor:
    """Mean next-token cross-entropy plus the summed Soft-MoE auxiliary loss."""
    logits, aux = model(token_ids)
    ids = torch.as_tensor(token_ids, dtype=torch.long)
    if ids.numel() < 2:
        ce = torch.zeros((), dtype=logits.dtype)
    else:
        ce = F.cross_entropy(logits[:-1], ids[1:])
    return ce + aux


def classification_loss(model: TinyModel, token_ids, label: int) -> torch.Tensor:
    logits, aux = model.classify(token_ids)
    return F.cross_entropy(logits.unsqueeze(0), torch.tensor([label])) + aux


def batch_loss(model: TinyModel, batch: Sequence) -> torch.Tensor:
    """Mean per-example loss. Items are token-id sequences (LM) or ``(ids, label)`` pairs."""
    if not batch:
        raise ValueError("empty batch")
    total = None
    for item in batch:
        if isinstance(item, tuple):
            loss = classification_loss(model, item[0], int(item[1]))
        else:
            loss = lm_loss(model, item)
        total = loss if total is None else total + loss
    return total / len(batch)


def loss_and_grads(model: TinyModel, batch: Sequence):
    """Scalar loss and a ``{name: gradient}`` dict over all trainable tensors."""
    params = model.trainable_parameters()
    loss = batch_loss(model, batch)
    grads = torch.autograd.grad(loss, [p for _, p in params], allow_unused=True)
    out = {}
    for (name, p), g in zip(params, grads):
        out[name] = torch.zeros_like(p) if g is None else g.detach()
    return float(loss.detach()), out


def count_trainable(model: nn.Module) -> dict:
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    total = sum(p.numel() for p in model.parameters())
    groups = {"lora": 0, "moe": 0, "head": 0, "other": 0}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        if "lora_" in name:
            groups["lora"] += p.numel()
        elif ".moe." in name:
            groups["moe"] += p.numel()
        elif name.startswith("head."):
            groups["head"] += p.numel()
        else:
            groups["other"] += p.numel()
    return {"trainable": trainable, "total": total,
            "fraction": trainable / total if total else 0.0, "by_group": groups}


def adapter_param_count(d_in: int, d_out: int, rank: int) -> int:
    return rank * (d_in + d_out)


def randomize_adapters(model: TinyModel, scale: float = 0.1, seed: int = 0) -> None:
    """Give LoRA ``B`` matrices non-zero values (useful for gradient checks away from init)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("lora_B"):
                p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)


# --- checkpoint container -------------------------------------------------
#
# Layout: 8-byte little-endian header length N, N bytes of UTF-8 JSON, then the
# concatenated row-major tensor bytes. The header maps each tensor name to
# {"dtype", "shape", "offsets": [begin, end]} relative to the data section, and
# "__metadata__" to free-form JSON.

_NP_DTYPES = {"float64": np.float64, "float32": np.float32, "int64": np.int64}


def save_tensors(path, tensors: dict, metadata: Optional[dict] = None) -> None:
    header: dict = {"__metadata__": metadata or {}}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name].detach().cpu().numpy() if torch.is_tensor(tensors[name])
                                   else np.asarray(tensors[name]))
        dtype = arr.dtype.name
        if dtype not in _NP_DTYPES:
            raise ValueError(f"unsupported dtype {dtype} for {name}")
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        header[name] = {"dtype": dtype, "shape": list(arr.shape), "offsets": [offset, offset + len(data)]}
        blobs.append(data)
        offset += len(data)
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blobs:
            fh.write(b)


def load_tensors(path) -> tuple:
    """Return ``({name: torch.Tensor}, metadata)``."""
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        data = fh.read()
    meta = header.pop("__metadata__", {})
    out = {}
    for name, spec in header.items():
        b, e = spec["offsets"]
        arr = np.frombuffer(data[b:e], dtype=np.dtype(_NP_DTYPES[spec["dtype"]]).newbyteorder("<"))
        out[name] = torch.from_numpy(arr.reshape(spec["shape"]).astype(_NP_DTYPES[spec["dtype"]]))
    return out, meta


def save_model(model: TinyModel, path, extra: Optional[dict] = None) -> None:
    meta = {"config": model.cfg.to_dict(), "format": "sessionlab-tensors/1"}
    if extra:
        meta.update(extra)
    save_tensors(path, dict(model.state_dict()), meta)


def load_model(path) -> TinyModel:
    tensors, meta = load_tensors(path)
    model = TinyModel(TinyConfig(**meta["config"]))
    model.load_state_dict(tensors)
    return model


# --- finite-difference oracle ----------------------------------------------

class _BatchLoss(nn.Module):
    def __init__(self, model: TinyModel, batch: Sequence):
        super().__init__()
        self.model = model
        self.batch = batch

    def forward(self):
        return batch_loss(self.model, self.batch)


def finite_difference_grads(model: TinyModel, batch: Sequence, eps: float = 1e-5, chunk: int = 1024) -> dict:
    """Central differences of ``batch_loss`` w.r.t. every trainable element.

    Only forward evaluations are used, so the result is independent of
    autograd. Perturbed copies are evaluated ``chunk`` at a time with ``vmap``.
    """
    wrapper = _BatchLoss(model, batch)
    out = {}
    was_training = model.training
    model.eval()  # dropout would make the perturbed losses incomparable
    with torch.no_grad():
        for name, p in model.trainable_parameters():
            base = p.detach()
            n = base.numel()

            def loss_at(delta, name=name, base=base):
                return functional_call(wrapper, {"model." + name: base + delta}, ())

            parts = []
            for i in range(0, n, chunk):
                idx = torch.arange(i, min(i + chunk, n))
                delta = torch.zeros(idx.numel(), n, dtype=base.dtype)
                delta[torch.arange(idx.numel()), idx] = eps
                delta = delta.view(idx.numel(), *base.shape)
                parts.append((vmap(loss_at)(delta) - vmap(loss_at)(-delta)) / (2 * eps))
            out[name] = torch.cat(parts).view(base.shape)
    model.train(was_training)
    return out


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor, floor: float = 1e-6) -> torch.Tensor:
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps near-zero gradients from dividing by ~0."""
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()), torch.full_like(analytic, floor))
    return (analytic - numeric).abs() / denom


def gradient_check(model: TinyModel, batch: Sequence, eps: float = 1e-5, floor: float = 1e-6) -> dict:
    """Max relative error between autograd and central differences over all trainable tensors."""
    was_training = model.training
    model.eval()
    try:
        _, grads = loss_and_grads(model, batch)
        params = model.trainable_parameters()
        numeric = finite_difference_grads(model, batch, eps)
    finally:
        model.train(was_training)
    per_tensor = {name: float(relative_error(grads[name], numeric[name], floor).max()) for name, _ in params}
    return {"max_relative_error": max(per_tensor.values()), "per_tensor": per_tensor,
            "n_checked": sum(p.numel() for _, p in params)}


def save_config(cfg: TinyConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
