"""Multi-expert training: point-decoder pretraining, Visual/Fusion expert training, checkpoints."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .anchor import AnchorConfig, generate_anchor_prompt
from .core import Mask
from .decoder import KINDS, MaskDecoder, encode_points
from .features import BACKEND_SEED, FeatureGrid, encode_patches
from .losses import LossWeights, mask_loss, total_loss
from .matcher import MatcherConfig, VPMatcher, mask_pool
from .synth_data import SceneConfig, ViewPair, generate_single_view, pair_seed

log = logging.getLogger(__name__)

EXPERT_KINDS = ("anchor", "visual", "fusion")
LOG_FIELDS = ("step", "lr", "loss_total", "loss_v", "loss_s", "loss_m", "grad_norm")


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 4e-5
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.05
    grad_clip_norm: float = 1.0
    epochs: int = 24
    batch_size: int = 8
    grad_accum: int = 1
    warmup_ratio: float = 0.05
    # 0 = derive from epochs
    max_steps: int = 0
    seed: int = 0
    lambda_v: float = 1.0
    lambda_s: float = 1.0
    lambda_m: float = 10.0
    temperature: float = 0.07
    warmup_contrastive_steps: int = 4000
    warmup_lambda_v: float = 100.0
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    n_anchor_points: int = 1
    # point-decoder pretraining
    pretrain_scenes: int = 1024
    max_prompt_points: int = 3

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not 0 <= self.warmup_ratio < 1:
            raise ValueError("warmup_ratio must be in [0, 1)")
        if self.batch_size < 1 or self.grad_accum < 1:
            raise ValueError("batch_size and grad_accum must be >= 1")

    @property
    def betas(self) -> tuple[float, float]:
        return (self.beta1, self.beta2)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda_v=self.lambda_v,
            lambda_s=self.lambda_s,
            lambda_m=self.lambda_m,
            temperature=self.temperature,
            warmup_contrastive_steps=self.warmup_contrastive_steps,
            warmup_lambda_v=self.warmup_lambda_v,
            ce_weight=self.ce_weight,
            dice_weight=self.dice_weight,
        )

    def total_steps(self, n_items: int) -> int:
        if self.max_steps:
            return self.max_steps
        per_epoch = math.ceil(n_items / (self.batch_size * self.grad_accum))
        return self.epochs * per_epoch


# Laptop-CPU settings: training from scratch needs a larger step size than fine-tuning.
DESK_TRAIN = TrainConfig(lr=2e-3, max_steps=2000, warmup_contrastive_steps=150)


def train_config_from_dict(values: dict[str, str], base: TrainConfig = TrainConfig()) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    kwargs = {}
    for k, v in values.items():
        if k not in types:
            raise KeyError(k)
        kwargs[k] = int(v) if types[k] in ("int", int) else float(v)
    return replace(base, **kwargs)


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()[:16]


def configure_threads() -> int:
    """Apply ``V2LAB_THREADS``: 0 (default) = single-threaded deterministic mode."""
    n = int(os.environ.get("V2LAB_THREADS", "0"))
    torch.set_num_threads(max(n, 1))
    if n == 0:
        torch.use_deterministic_algorithms(True)
    return n


def lr_at_step(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to ``cfg.lr``, then cosine decay to 0 at ``total_steps``."""
    warm = cfg.warmup_ratio * total_steps
    if step < warm:
        return cfg.lr * step / warm
    span = total_steps - warm
    progress = min(max((step - warm) / span, 0.0), 1.0) if span > 0 else 1.0
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# --- features and data ------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureBackend:
    """Synthetic encoder settings for the decoder role and the anchor (matching) role."""

    patch_size: int = 4
    anchor_patch_size: int = 4
    dim: int = 64
    seed: int = BACKEND_SEED

    def encode(self, image) -> FeatureGrid:
        return encode_patches(image, self.patch_size, self.dim, self.seed)

    def encode_anchor(self, image) -> FeatureGrid:
        return encode_patches(image, self.anchor_patch_size, self.dim, self.seed)


@dataclass
class PairData:
    """Precomputed tensors for a list of view pairs."""

    feats_q: torch.Tensor
    feats_t: torch.Tensor
    masks_q: torch.Tensor
    masks_t: torch.Tensor
    anchor_q: list[FeatureGrid]
    anchor_t: list[FeatureGrid]
    anchor_xy: list[np.ndarray]
    patch_size: int

    def __len__(self) -> int:
        return self.feats_q.shape[0]

    @property
    def image_hw(self) -> tuple[int, int]:
        return tuple(self.masks_q.shape[-2:])

    def subset(self, idx) -> "PairData":
        idx = list(idx)
        t = torch.as_tensor(idx, dtype=torch.long)
        return PairData(
            self.feats_q[t], self.feats_t[t], self.masks_q[t], self.masks_t[t],
            [self.anchor_q[i] for i in idx], [self.anchor_t[i] for i in idx],
            [self.anchor_xy[i] for i in idx], self.patch_size,
        )

    def with_anchor_points(self, anchor_cfg: AnchorConfig) -> "PairData":
        out = copy.copy(self)
        out.anchor_xy = [
            generate_anchor_prompt(q, t, Mask(m.numpy() > 0.5), anchor_cfg).points.xy
            for q, t, m in zip(self.anchor_q, self.anchor_t, self.masks_q)
        ]
        return out


def prepare_pairs(pairs: Sequence[ViewPair], backend: FeatureBackend = FeatureBackend(), anchor_cfg: AnchorConfig = AnchorConfig()) -> PairData:
    fq = [backend.encode(p.query_image) for p in pairs]
    ft = [backend.encode(p.target_image) for p in pairs]
    if backend.anchor_patch_size == backend.patch_size:
        aq, at = fq, ft
    else:
        aq = [backend.encode_anchor(p.query_image) for p in pairs]
        at = [backend.encode_anchor(p.target_image) for p in pairs]
    data = PairData(
        feats_q=torch.as_tensor(np.stack([g.data for g in fq])),
        feats_t=torch.as_tensor(np.stack([g.data for g in ft])),
        masks_q=torch.as_tensor(np.stack([p.query_mask.data for p in pairs]), dtype=torch.float32),
        masks_t=torch.as_tensor(np.stack([p.target_mask.data for p in pairs]), dtype=torch.float32),
        anchor_q=aq,
        anchor_t=at,
        anchor_xy=[],
        patch_size=backend.patch_size,
    )
    return data.with_anchor_points(anchor_cfg)


@dataclass
class PointDataset:
    """Single-view (features, object mask) samples for point-prompt pretraining."""

    feats: torch.Tensor
    masks: torch.Tensor
    patch_size: int

    def __len__(self) -> int:
        return self.feats.shape[0]


def build_point_dataset(scene_cfg: SceneConfig, n_scenes: int, backend: FeatureBackend = FeatureBackend(), min_area: int = 40) -> PointDataset:
    feats, masks = [], []
    for i in range(n_scenes):
        image, objs = generate_single_view(replace(scene_cfg, seed=pair_seed(scene_cfg.seed + 7_000_001, i)))
        grid = backend.encode(image)
        for m in objs:
            if m.area() >= min_area:
                feats.append(grid.data)
                masks.append(m.data)
    return PointDataset(
        torch.as_tensor(np.stack(feats)), torch.as_tensor(np.stack(masks), dtype=torch.float32), backend.patch_size
    )


def sample_interior_points(masks: torch.Tensor, counts: Sequence[int], rng: np.random.Generator) -> list[np.ndarray]:
    """Uniform foreground pixel centres, ``counts[i]`` per mask, in canonical coordinates."""
    out = []
    for m, k in zip(masks, counts):
        ys, xs = np.nonzero(m.numpy() > 0.5)
        pick = rng.integers(len(xs), size=k)
        out.append(np.stack([xs[pick] + 0.5, ys[pick] + 0.5], axis=1))
    return out


def central_point(m: np.ndarray) -> np.ndarray:
    """Foreground pixel centre nearest the mask centroid, canonical coordinates."""
    ys, xs = np.nonzero(m)
    k = np.argmin((xs - xs.mean()) ** 2 + (ys - ys.mean()) ** 2)
    return np.array([[xs[k] + 0.5, ys[k] + 0.5]])


def point_tokens(xy_list: Sequence[np.ndarray], image_hw, dim: int, dtype=torch.float32):
    """Pad per-sample point lists to (B, n, D) tokens with point kinds and validity."""
    n = max(len(xy) for xy in xy_list)
    b = len(xy_list)
    xy = torch.zeros(b, n, 2, dtype=dtype)
    valid = torch.zeros(b, n, dtype=torch.bool)
    for i, p in enumerate(xy_list):
        xy[i, : len(p)] = torch.as_tensor(p, dtype=dtype)
        valid[i, : len(p)] = True
    tokens = encode_points(xy, image_hw, dim) * valid[..., None]
    kinds = torch.full((b, n), KINDS.index("point"), dtype=torch.long)
    return tokens, kinds, valid


# --- experts --------------------------------------------------------------------------


@dataclass
class Expert:
    kind: str
    decoder: MaskDecoder
    matcher: Optional[VPMatcher] = None
    step: int = 0

    def __post_init__(self):
        if self.kind not in EXPERT_KINDS:
            raise ValueError(f"unknown expert kind {self.kind!r}")
        if self.kind == "anchor" and self.matcher is not None:
            raise ValueError("the anchor expert has no matcher")
        if self.kind != "anchor" and self.matcher is None:
            raise ValueError(f"{self.kind} expert needs a matcher")

    def modules(self):
        return [m for m in (self.decoder, self.matcher) if m is not None]

    def parameters(self):
        for m in self.modules():
            yield from m.parameters()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.train(mode)
        return self

    def eval(self):
        return self.train(False)


def expert_forward(expert: Expert, data: PairData, idx=None):
    """Run one expert on pairs ``idx`` (all by default).

    Returns (target logits, v_hat_c, structural logits); the last two are None
    for the anchor expert.
    """
    if idx is None:
        idx = range(len(data))
    t = torch.as_tensor(list(idx), dtype=torch.long)
    dtype = next(expert.decoder.parameters()).dtype
    fq, ft = data.feats_q[t].to(dtype), data.feats_t[t].to(dtype)
    mq = data.masks_q[t].to(dtype)
    hw = data.image_hw
    dim = expert.decoder.dim
    v_hat = logits_c = None
    parts_tok, parts_kind, parts_valid = [], [], []
    if expert.kind in ("anchor", "fusion"):
        tok, kind, valid = point_tokens([data.anchor_xy[i] for i in t.tolist()], hw, dim, dtype)
        parts_tok.append(tok), parts_kind.append(kind), parts_valid.append(valid)
    if expert.kind in ("visual", "fusion"):
        v_hat, logits_c, prompt = expert.matcher(fq, mq)
        parts_tok.append(prompt[:, None])
        parts_kind.append(torch.full((len(t), 1), KINDS.index("visual"), dtype=torch.long))
        parts_valid.append(torch.ones(len(t), 1, dtype=torch.bool))
    logits = expert.decoder(
        ft, torch.cat(parts_tok, 1), torch.cat(parts_kind, 1), torch.cat(parts_valid, 1), data.patch_size, hw
    )
    return logits, v_hat, logits_c


def predict_masks(expert: Expert, data: PairData, batch_size: int = 64) -> np.ndarray:
    """Binary target-view predictions (N, H, W)."""
    expert.eval()
    out = []
    with torch.no_grad():
        for s in range(0, len(data), batch_size):
            logits, _, _ = expert_forward(expert, data, range(s, min(s + batch_size, len(data))))
            out.append((logits > 0).numpy())
    return np.concatenate(out)


# --- training loops ------------------------------------------------------------------


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless epoch-permuted index batches without repeats inside a batch."""
    while True:
        perm = rng.permutation(n)
        for s in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield perm[s : s + batch_size]


def _optimizer(params, cfg: TrainConfig):
    return torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def _optimize(params, loss_fn, n_items: int, cfg: TrainConfig, start_step: int = 0, log_rows=None, total_steps=None):
    """Shared AdamW loop with schedule, accumulation, clipping and NaN guard.

    ``loss_fn(batch_idx, step)`` returns (total, components). Returns log rows.
    """
    params = [p for p in params if p.requires_grad]
    opt = _optimizer(params, cfg)
    rng = np.random.default_rng([cfg.seed, start_step])
    batches = _batches(n_items, cfg.batch_size, rng)
    total = total_steps or (cfg.total_steps(n_items) + start_step)
    rows = log_rows if log_rows is not None else []
    for step in range(start_step, total):
        lr = lr_at_step(step, total, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        opt.zero_grad(set_to_none=True)
        acc = {"loss_total": 0.0, "loss_v": 0.0, "loss_s": 0.0, "loss_m": 0.0}
        for _ in range(cfg.grad_accum):
            loss, comps = loss_fn(next(batches), step)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}")
            (loss / cfg.grad_accum).backward()
            acc["loss_total"] += loss.item() / cfg.grad_accum
            for k, v in comps.items():
                acc[k] += float(v.detach() if torch.is_tensor(v) else v) / cfg.grad_accum
        grad_norm = float(torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip_norm))
        if not math.isfinite(grad_norm):
            raise TrainingError(f"non-finite gradient at step {step}")
        opt.step()
        rows.append({"step": step, "lr": lr, **acc, "grad_norm": grad_norm})
        if step % 500 == 0:
            log.info("step %d lr %.2e loss %.4f", step, lr, acc["loss_total"])
    return rows


def pretrain_point_decoder(dataset: PointDataset, cfg: TrainConfig, decoder: Optional[MaskDecoder] = None, **decoder_kwargs):
    """Train a decoder on ground-truth point prompts with the mask loss.

    Each sample gets 1..``cfg.max_prompt_points`` interior points (one point
    three times out of four). Returns (decoder, log rows).
    """
    torch.manual_seed(cfg.seed)
    dec = decoder or MaskDecoder(feat_dim=dataset.feats.shape[1], **decoder_kwargs)
    dec.train()
    rng = np.random.default_rng([cfg.seed, 17])
    weights = cfg.loss_weights
    hw = tuple(dataset.masks.shape[-2:])

    def loss_fn(idx, step):
        t = torch.as_tensor(idx, dtype=torch.long)
        counts = [1 if rng.uniform() < 0.75 else int(rng.integers(2, cfg.max_prompt_points + 1)) for _ in idx]
        counts = [min(c, cfg.max_prompt_points) for c in counts]
        tok, kind, valid = point_tokens(sample_interior_points(dataset.masks[t], counts, rng), hw, dec.dim)
        logits = dec(dataset.feats[t], tok, kind, valid, dataset.patch_size, hw)
        loss = mask_loss(logits, dataset.masks[t], weights)
        return loss, {"loss_m": loss.detach()}

    rows = _optimize(list(dec.parameters()), loss_fn, len(dataset), cfg)
    dec.eval()
    for p in dec.parameters():
        p.requires_grad_(False)
    return dec, rows


def new_expert(kind: str, point_decoder: MaskDecoder, matcher_cfg: Optional[MatcherConfig] = None, seed: int = 0) -> Expert:
    """Anchor experts share the frozen point decoder; others start from a copy of it."""
    if kind == "anchor":
        return Expert("anchor", point_decoder)
    torch.manual_seed(seed)
    dec = copy.deepcopy(point_decoder)
    for p in dec.parameters():
        p.requires_grad_(True)
    cfg = matcher_cfg or MatcherConfig(dim=point_decoder.feat_proj.in_channels)
    return Expert(kind, dec, VPMatcher(cfg))


def expert_loss(expert: Expert, data: PairData, idx, step: int, weights: LossWeights):
    logits_t, v_hat, logits_c = expert_forward(expert, data, idx)
    t = torch.as_tensor(list(idx), dtype=torch.long)
    dtype = logits_t.dtype
    ft, mt = data.feats_t[t].to(dtype), data.masks_t[t].to(dtype)
    v_t, _ = mask_pool(ft, mt, data.patch_size)
    return total_loss(v_hat, v_t, logits_c, mt, logits_t, weights, step)


def train_expert(kind: str, data: PairData, cfg: TrainConfig, point_decoder: Optional[MaskDecoder] = None,
                 init: Optional[Expert] = None, matcher_cfg: Optional[MatcherConfig] = None):
    """Optimize matcher + decoder of a Visual or Fusion expert. Returns (expert, log rows).

    ``init`` resumes from an existing expert, continuing its step count.
    """
    if kind == "anchor":
        raise TrainingError("the anchor expert is training-free")
    if kind not in EXPERT_KINDS:
        raise ValueError(f"unknown expert kind {kind!r}")
    if init is None:
        if point_decoder is None:
            raise ValueError("need a pretrained point decoder or an expert to resume")
        expert = new_expert(kind, point_decoder, matcher_cfg, cfg.seed)
    else:
        if init.kind != kind:
            raise ValueError(f"cannot resume a {init.kind} expert as {kind}")
        expert = init
        for p in expert.parameters():
            p.requires_grad_(True)
    torch.manual_seed(cfg.seed + expert.step)
    expert.train()
    weights = cfg.loss_weights
    start = expert.step
    total = start + cfg.total_steps(len(data))
    rows = _optimize(
        list(expert.parameters()),
        lambda idx, step: expert_loss(expert, data, idx, step, weights),
        len(data), cfg, start_step=start, total_steps=total,
    )
    expert.step = total
    expert.eval()
    return expert, rows


def write_log(rows, path, append: bool = False) -> None:
    p = Path(path)
    new = not (append and p.exists())
    with p.open("a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, extrasaction="ignore", lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow({k: (f"{r[k]:.9g}" if isinstance(r[k], float) else r[k]) for k in LOG_FIELDS})


# --- checkpoints ------------------------------------------------------------------------

CKPT_MAGIC = b"V2CK"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sII")


def _decoder_spec(dec: MaskDecoder) -> dict:
    return {
        "feat_dim": dec.feat_proj.in_channels,
        "dim": dec.dim,
        "n_blocks": len(dec.blocks),
        "heads": dec.blocks[0].self_attn.heads if len(dec.blocks) else 1,
        "mlp_ratio": dec.blocks[0].mlp.fc1.out_features // dec.dim if len(dec.blocks) else 2,
    }


def save_checkpoint(experts: Sequence[Expert], path, config: Optional[dict] = None, backend_seed: int = BACKEND_SEED) -> None:
    """One file: fixed header, JSON manifest, then raw little-endian tensors per section."""
    sections, blobs, offset = [], [], 0
    manifest = {"config_hash": config_hash(config or {}), "config": config or {}, "backend_seed": backend_seed, "experts": []}
    for ex in experts:
        entry = {"kind": ex.kind, "step": ex.step, "decoder": _decoder_spec(ex.decoder)}
        if ex.matcher is not None:
            mc = asdict(ex.matcher.cfg)
            mc["channels"] = list(mc["channels"])
            entry["matcher"] = mc
        manifest["experts"].append(entry)
        for prefix, module in (("decoder", ex.decoder), ("matcher", ex.matcher)):
            if module is None:
                continue
            for name, t in module.state_dict().items():
                arr = t.detach().cpu().numpy()
                arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
                raw = np.ascontiguousarray(arr).tobytes()
                sections.append({
                    "name": f"{ex.kind}/{prefix}/{name}", "dtype": arr.dtype.str, "shape": list(arr.shape),
                    "offset": offset, "nbytes": len(raw), "crc32": zlib.crc32(raw),
                })
                blobs.append(raw)
                offset += len(raw)
    manifest["sections"] = sections
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    Path(path).write_bytes(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(head)) + head + b"".join(blobs))


def load_checkpoint(path, expected_config: Optional[dict] = None):
    """Returns (experts, manifest). Warns when ``expected_config`` hashes differently."""
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: truncated in section 'header'")
    magic, version, head_len = _CKPT_HEAD.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic in section 'header'")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _CKPT_HEAD.size
    if len(raw) < start + head_len:
        raise CheckpointError(f"{path}: truncated in section 'manifest'")
    try:
        manifest = json.loads(raw[start : start + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt section 'manifest': {e}") from None
    if expected_config is not None and config_hash(expected_config) != manifest["config_hash"]:
        warnings.warn(f"{path}: config hash {manifest['config_hash']} differs from the current config", stacklevel=2)

    payload = raw[start + head_len :]
    tensors = {}
    for sec in manifest["sections"]:
        lo, hi = sec["offset"], sec["offset"] + sec["nbytes"]
        if hi > len(payload):
            raise CheckpointError(f"{path}: truncated in section '{sec['name']}'")
        chunk = payload[lo:hi]
        if zlib.crc32(chunk) != sec["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch in section '{sec['name']}'")
        arr = np.frombuffer(chunk, dtype=np.dtype(sec["dtype"])).reshape(sec["shape"])
        tensors[sec["name"]] = torch.from_numpy(arr.copy())

    experts = []
    for entry in manifest["experts"]:
        kind = entry["kind"]
        dec = MaskDecoder(**entry["decoder"])
        _load_state(dec, tensors, f"{kind}/decoder/", path)
        matcher = None
        if "matcher" in entry:
            mc = dict(entry["matcher"])
            mc["channels"] = tuple(mc["channels"])
            matcher = VPMatcher(MatcherConfig(**mc))
            _load_state(matcher, tensors, f"{kind}/matcher/", path)
        dtype = next(iter(dec.state_dict().values())).dtype
        ex = Expert(kind, dec.to(dtype), matcher, entry["step"])
        ex.eval()
        experts.append(ex)
    return experts, manifest


def _load_state(module: torch.nn.Module, tensors: dict, prefix: str, path) -> None:
    state = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"{path}: missing section '{prefix}{sorted(missing)[0]}'")
    dtypes = {v.dtype for v in state.values()}
    if len(dtypes) == 1:
        module.to(dtypes.pop())
    module.load_state_dict(state)
