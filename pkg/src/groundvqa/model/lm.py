"""The assembled video-language model, its training step and greedy decoding."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..core import DomainError, VideoRecord
from ..grounding_format import VIDEO_TOKEN
from .connector import MSVLC, ConnectorConfig
from .decoder import DecoderConfig, TinyDecoder
from .encoder import VisionStub, sample_frames
from .tokenizer import Tokenizer

CHECKPOINT_FORMAT = "groundvqa-checkpoint"
CHECKPOINT_VERSION = 1
PARAM_GROUPS = ("connector", "decoder", "embedder")

# named presets; only the desk preset is runnable here
BACKEND_PRESETS = {
    "desk": {"vision": "random-projection", "decoder": "tiny-transformer"},
    "full": {"vision": "openai/clip-vit-large-patch14-336", "vision_select_layer": -2,
             "decoder": "mistralai/Mistral-7B-Instruct", "image_size": 336},
}


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    connector: ConnectorConfig
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 96
    vision_seed: int = 0
    frame_indices_in_prompt: bool = False
    backend: str = "desk"

    def to_dict(self) -> dict:
        return {
            "connector": self.connector.to_dict(),
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "max_len": self.max_len,
            "vision_seed": self.vision_seed,
            "frame_indices_in_prompt": self.frame_indices_in_prompt,
            "backend": self.backend,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["connector"] = ConnectorConfig(**d["connector"])
        return cls(**d)


class VideoLM(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab_size: int):
        super().__init__()
        if cfg.backend != "desk":
            raise DomainError(f"backend {cfg.backend!r} is a named preset only; use 'desk'")
        self.cfg = cfg
        dim = cfg.connector.embed_dim
        self.connector = MSVLC(cfg.connector)
        # frozen text encoder: a fixed token embedding table
        self.embedder = nn.Embedding(vocab_size, dim)
        nn.init.normal_(self.embedder.weight, std=1.0)
        self.decoder = TinyDecoder(DecoderConfig(vocab_size, dim, cfg.n_layers, cfg.n_heads, cfg.max_len))

    def group(self, name: str) -> nn.Module:
        if name not in PARAM_GROUPS:
            raise KeyError(name)
        return getattr(self, name)


@dataclass
class Batch:
    ids: torch.Tensor        # [B, L] token ids, visual slots hold the <video> id
    vis_mask: torch.Tensor   # [B, L] bool, True at visual slots
    loss_mask: torch.Tensor  # [B, L-1] bool, True where the next token is supervised
    dense: torch.Tensor      # [B, dense_frames, feature_dim]
    sparse: torch.Tensor     # [B, sparse_frames, feature_dim]
    # precomputed visual tokens [B, V, C]; replaces the connector when set
    visual: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def select(self, idx) -> "Batch":
        return Batch(self.ids[idx], self.vis_mask[idx], self.loss_mask[idx], self.dense[idx], self.sparse[idx],
                     None if self.visual is None else self.visual[idx])


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    warmup_ratio: float = 0.03
    total_steps: int = 1
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 1.0


def cosine_lr(step: int, peak: float, total_steps: int, warmup_ratio: float) -> float:
    """Linear warmup then cosine decay to zero; ``step`` counts from 0."""
    warmup = math.ceil(warmup_ratio * total_steps)
    if step < warmup:
        return peak * step / max(1, warmup)
    progress = (step - warmup) / max(1, total_steps - warmup)
    return peak * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


@dataclass
class ModelState:
    model: VideoLM
    tokenizer: Tokenizer
    freeze_mask: dict[str, bool] = field(default_factory=lambda: {g: False for g in PARAM_GROUPS})
    provenance: list[str] = field(default_factory=list)
    optimizer: Optional[torch.optim.Optimizer] = None
    opt_config: Optional[OptimizerConfig] = None
    step: int = 0
    last_lr: float = 0.0
    # free-form settings that travel with the checkpoint (e.g. prompt style)
    meta: dict = field(default_factory=dict)

    @property
    def cfg(self) -> ModelConfig:
        return self.model.cfg

    @property
    def connector_params(self) -> dict[str, torch.Tensor]:
        return dict(self.model.connector.named_parameters())

    @property
    def decoder_params(self) -> dict[str, torch.Tensor]:
        return dict(self.model.decoder.named_parameters())

    @property
    def embedder_params(self) -> dict[str, torch.Tensor]:
        return dict(self.model.embedder.named_parameters())

    def set_trainable(self, groups: Sequence[str]) -> None:
        """Freeze everything outside ``groups`` and drop any optimizer state."""
        unknown = set(groups) - set(PARAM_GROUPS)
        if unknown:
            raise KeyError(f"unknown parameter groups {sorted(unknown)}")
        # the text embedder stays frozen in every stage
        self.freeze_mask = {g: (g not in groups) for g in PARAM_GROUPS}
        for g in PARAM_GROUPS:
            for p in self.model.group(g).parameters():
                p.requires_grad_(not self.freeze_mask[g])
        self.optimizer = None
        self.opt_config = None
        self.step = 0

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for g in PARAM_GROUPS if not self.freeze_mask[g] for p in self.model.group(g).parameters()]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.model.state_dict().items()}


def new_state(cfg: ModelConfig, tokenizer: Tokenizer, seed: int = 0, dtype=torch.float32) -> ModelState:
    torch.manual_seed(seed)
    model = VideoLM(cfg, len(tokenizer)).to(dtype)
    state = ModelState(model=model, tokenizer=tokenizer)
    state.set_trainable([])
    return state


# ---------------------------------------------------------------- batching

@lru_cache(maxsize=8)
def _vision(feature_dim: int, seed: int) -> VisionStub:
    return VisionStub(feature_dim, seed)


def video_inputs(state: ModelState, video: VideoRecord,
                 rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, np.ndarray]:
    cc = state.cfg.connector
    if video.feature_dim != cc.feature_dim:
        raise DomainError(f"video features have dim {video.feature_dim}, connector expects {cc.feature_dim}")
    vision = _vision(cc.feature_dim, state.cfg.vision_seed)
    off_d = None if rng is None else float(rng.random())
    off_s = None if rng is None else float(rng.random())
    dense = vision(sample_frames(video, cc.dense_frames, off_d)).values
    sparse = vision(sample_frames(video, cc.sparse_frames, off_s)).values
    return dense, sparse


def _slot_tokens(state: ModelState) -> list[Optional[int]]:
    """Token ids filling the expanded <video> slot; None marks a visual token."""
    cc = state.cfg.connector
    n = cc.output_tokens_per_branch
    branches = {"multi": 2, "dense_only": 1, "sparse_only": 1}[cc.mode]
    if not state.cfg.frame_indices_in_prompt:
        return [None] * (branches * n)
    slots: list[Optional[int]] = []
    for _ in range(branches):
        for i in range(n):
            # timeline position of the token's window center
            pos = min(100, ((2 * i + 1) * 100 + n) // (2 * n))
            slots += state.tokenizer.encode(str(pos)) + [None]
    return slots


def encode_prompt(state: ModelState, prompt: str) -> tuple[list[int], list[bool]]:
    tok = state.tokenizer
    if prompt.count(VIDEO_TOKEN) != 1:
        raise DomainError(f"prompt must contain exactly one {VIDEO_TOKEN} token")
    before, after = prompt.split(VIDEO_TOKEN)
    ids = [tok.bos_id] + tok.encode(before)
    vis = [False] * len(ids)
    for s in _slot_tokens(state):
        ids.append(tok.video_id if s is None else s)
        vis.append(s is None)
    tail = tok.encode(after)
    return ids + tail, vis + [False] * len(tail)


def make_batch(state: ModelState, videos: Optional[Sequence[VideoRecord]], prompts: Sequence[str],
               responses: Optional[Sequence[str]] = None, visual: Optional[torch.Tensor] = None,
               rng: Optional[np.random.Generator] = None) -> Batch:
    """Tokenize prompts (and responses, for training) next to their videos.

    ``videos`` may be None when ``visual`` supplies the visual tokens directly.
    ``rng`` turns on frame-sampling jitter.
    """
    tok = state.tokenizer
    seqs, vmasks, starts = [], [], []
    for i, prompt in enumerate(prompts):
        ids, vis = encode_prompt(state, prompt)
        starts.append(len(ids))
        if responses is not None:
            resp = tok.encode(responses[i]) + [tok.eos_id]
            ids = ids + resp
            vis = vis + [False] * len(resp)
        seqs.append(ids)
        vmasks.append(vis)
    length = max(len(s) for s in seqs)
    b = len(seqs)
    ids_t = torch.full((b, length), tok.pad_id, dtype=torch.long)
    vis_t = torch.zeros((b, length), dtype=torch.bool)
    loss_t = torch.zeros((b, max(length - 1, 1)), dtype=torch.bool)
    for i, (s, v) in enumerate(zip(seqs, vmasks)):
        ids_t[i, : len(s)] = torch.tensor(s)
        vis_t[i, : len(v)] = torch.tensor(v)
        if responses is not None:
            # logits at position t predict token t+1
            loss_t[i, starts[i] - 1 : len(s) - 1] = True
    dtype = next(state.model.parameters()).dtype
    cc = state.cfg.connector
    if videos is None:
        if visual is None:
            raise DomainError("need videos or precomputed visual tokens")
        dense_t = torch.zeros((b, cc.dense_frames, cc.feature_dim), dtype=dtype)
        sparse_t = torch.zeros((b, cc.sparse_frames, cc.feature_dim), dtype=dtype)
    else:
        dense, sparse = zip(*(video_inputs(state, v, rng) for v in videos))
        dense_t = torch.as_tensor(np.stack(dense), dtype=dtype)
        sparse_t = torch.as_tensor(np.stack(sparse), dtype=dtype)
    return Batch(ids_t, vis_t, loss_t, dense_t, sparse_t, visual)


def visual_tokens(model: VideoLM, batch: Batch) -> torch.Tensor:
    if batch.visual is not None:
        return batch.visual
    cc = model.cfg.connector
    dense = batch.dense if cc.mode != "sparse_only" else None
    sparse = batch.sparse if cc.mode != "dense_only" else None
    return model.connector(dense, sparse)


def forward_logits(model: VideoLM, batch: Batch) -> torch.Tensor:
    visual = visual_tokens(model, batch)                         # [B, V, C]
    emb = model.embedder(batch.ids)
    emb = emb.masked_scatter(batch.vis_mask.unsqueeze(-1), visual.to(emb.dtype))
    return model.decoder(emb)


# ---------------------------------------------------------------- loss / step

def next_token_loss(logits: torch.Tensor, target_tokens: torch.Tensor, supervision_mask: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over supervised positions.

    ``logits`` [B, T, V], ``target_tokens`` [B, T], ``supervision_mask`` [B, T].
    """
    if logits.shape[:2] != target_tokens.shape or target_tokens.shape != supervision_mask.shape:
        raise DomainError("logits, targets and mask shapes disagree")
    n = int(supervision_mask.sum())
    if n == 0:
        raise DomainError("supervision mask selects no positions")
    sel = supervision_mask.reshape(-1)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1])[sel], target_tokens.reshape(-1)[sel])


def batch_loss(model: VideoLM, batch: Batch) -> torch.Tensor:
    logits = forward_logits(model, batch)
    return next_token_loss(logits[:, :-1], batch.ids[:, 1:], batch.loss_mask)


def training_step(state: ModelState, batch: Batch, opt_cfg: OptimizerConfig) -> tuple[ModelState, float]:
    if state.optimizer is None or state.opt_config is not opt_cfg:
        params = state.trainable_parameters()
        state.optimizer = torch.optim.AdamW(params, lr=opt_cfg.learning_rate, betas=opt_cfg.betas,
                                            weight_decay=opt_cfg.weight_decay) if params else None
        state.opt_config = opt_cfg
        state.step = 0
    lr = cosine_lr(state.step, opt_cfg.learning_rate, opt_cfg.total_steps, opt_cfg.warmup_ratio)
    state.model.train()
    loss = batch_loss(state.model, batch)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteLossError(f"loss is {value} at step {state.step}")
    if state.optimizer is not None:
        for g in state.optimizer.param_groups:
            g["lr"] = lr
        state.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if opt_cfg.grad_clip:
            nn.utils.clip_grad_norm_(state.trainable_parameters(), opt_cfg.grad_clip)
        state.optimizer.step()
    state.step += 1
    state.last_lr = lr
    return state, value


# ---------------------------------------------------------------- decoding

@torch.no_grad()
def generate(state: ModelState, videos: Sequence[VideoRecord], prompts: Sequence[str],
             max_new_tokens: int = 12, batch_size: int = 64) -> list[str]:
    """Greedy decoding, batched; each prompt pairs with the video at the same index."""
    out: list[str] = []
    for lo in range(0, len(prompts), batch_size):
        out += _generate_batch(state, videos[lo: lo + batch_size], prompts[lo: lo + batch_size], max_new_tokens)
    return out


def _generate_batch(state, videos, prompts, max_new_tokens):
    model = state.model
    model.eval()
    tok = state.tokenizer
    batch = make_batch(state, videos, prompts)
    lengths = (batch.ids != tok.pad_id).sum(dim=1)
    b, length = batch.ids.shape
    total = min(length + max_new_tokens, model.cfg.max_len)
    ids = torch.full((b, total), tok.pad_id, dtype=torch.long)
    ids[:, :length] = batch.ids
    vis = torch.zeros((b, total), dtype=torch.bool)
    vis[:, :length] = batch.vis_mask
    visual = visual_tokens(model, batch)
    done = torch.zeros(b, dtype=torch.bool)
    generated: list[list[int]] = [[] for _ in range(b)]
    rows = torch.arange(b)
    for _ in range(max_new_tokens):
        cur = int(lengths.max())
        if cur >= total:
            break
        emb = model.embedder(ids[:, :cur]).masked_scatter(vis[:, :cur].unsqueeze(-1), visual)
        logits = model.decoder(emb)
        nxt = logits[rows, lengths - 1].argmax(dim=-1)
        for i in range(b):
            if not done[i]:
                t = int(nxt[i])
                if t == tok.eos_id:
                    done[i] = True
                else:
                    generated[i].append(t)
        if bool(done.all()):
            break
        ids[rows, lengths.clamp(max=total - 1)] = torch.where(done, ids[rows, lengths.clamp(max=total - 1)], nxt)
        lengths = torch.where(done, lengths, (lengths + 1).clamp(max=total))
        done |= lengths >= total
    return [tok.decode(g) for g in generated]


def decode(state: ModelState, prompt_text: str, video: VideoRecord, max_new_tokens: int = 12) -> str:
    return generate(state, [video], [prompt_text], max_new_tokens)[0]


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(state: ModelState, path: str | os.PathLike) -> None:
    """Write a single ``.npz`` archive atomically (temp file, then rename)."""
    path = Path(path)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.cfg.to_dict(),
        "vocab": state.tokenizer.tokens,
        "split_digits": state.tokenizer.split_digits,
        "provenance": list(state.provenance),
        "meta": state.meta,
        "dtype": str(next(state.model.parameters()).dtype).replace("torch.", ""),
    }
    arrays = {f"param/{k}": v for k, v in state.snapshot().items()}
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".ckpt-", suffix=".npz")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint_header(path: str | os.PathLike) -> dict:
    with np.load(path) as z:
        header = json.loads(bytes(z["header"]).decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DomainError(f"{path} is not a checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise DomainError(f"unsupported checkpoint version {header.get('version')}")
    return header


def load_checkpoint(path: str | os.PathLike) -> ModelState:
    header = read_checkpoint_header(path)
    cfg = ModelConfig.from_dict(header["config"])
    tokenizer = Tokenizer(header["vocab"], header.get("split_digits", False))
    dtype = getattr(torch, header.get("dtype", "float32"))
    state = new_state(cfg, tokenizer, dtype=dtype)
    with np.load(path) as z:
        sd = {k[len("param/"):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("param/")}
    state.model.load_state_dict(sd)
    state.provenance = list(header["provenance"])
    state.meta = dict(header.get("meta", {}))
    return state
