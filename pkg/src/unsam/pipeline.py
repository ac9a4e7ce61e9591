"""Sequential multi-domain training, inference, evaluation and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import struct
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .core import DomainRegistry, ImageSample, RunConfig, seed_all
from .data import Dataset
from .dq_decoder import DQDecoder
from .dt_encoder import DTEncoder
from .errors import (ConfigError, DomainError, IncompatibleCheckpointError, IntegrityError,
                     ShapeError, TrainingError, ValidationError)
from .losses import LossReport, seg_loss
from .metrics import MetricsReport, connected_components
from .spgen import SPGen, downsample_gt, gate, retained_tokens, spgen_loss

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"UNSAMCKPT\x00"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ("epoch", "domain", "focal", "dice", "spgen", "total", "seg", "retained_tokens", "lr")


class UNSAM(nn.Module):
    """Encoder, self-prompt generator and domain-query decoder for ``num_domains`` domains."""

    def __init__(self, cfg: RunConfig, num_domains: int):
        super().__init__()
        if num_domains < 1:
            raise ValidationError("at least one domain is required")
        self.cfg = cfg
        self.num_domains = num_domains
        self.encoder = DTEncoder(cfg, num_domains)
        self.spgen = SPGen(cfg)
        self.decoder = DQDecoder(cfg, num_domains)
        self.trained_domains: list[int] = []
        self.to(cfg.torch_dtype)

    def frozen_parameters(self) -> dict[str, nn.Parameter]:
        return {f"encoder.{n}": p for n, p in self.encoder.backbone_parameters()}

    def trainable_parameters(self, domain_id: int) -> dict[str, nn.Parameter]:
        """Everything one training step on ``domain_id`` may update."""
        a = self.encoder.adapter_index(domain_id)
        q = self.decoder.query_index(domain_id)
        params = {
            "encoder.bypass.w_com": self.encoder.bypass.w_com,
            f"encoder.bypass.w_spec.{a}": self.encoder.bypass.w_spec[a],
            f"decoder.queries.{q}": self.decoder.queries[q],
        }
        params.update({f"spgen.{n}": p for n, p in self.spgen.named_parameters()})
        params.update({f"decoder.{n}": p for n, p in self.decoder.named_parameters()
                       if not n.startswith("queries.")})
        return params

    def inference_weights(self, domain_id: int | None = None, strategy: str = "specified"):
        """Adapter up-projections and query set for a domain or a zero-shot strategy."""
        trained = self.trained_domains or list(range(self.num_domains))
        w_up = self.encoder.select_inference_adapter(strategy, trained, domain_id)
        if strategy == "specified":
            query = self.decoder.query(domain_id)
        elif strategy == "last":
            query = self.decoder.query(trained[-1])
        else:
            slots = sorted({self.decoder.query_index(k) for k in trained})
            query = torch.stack([self.decoder.queries[s] for s in slots]).mean(dim=0)
        return w_up, query

    def forward(self, images: torch.Tensor, domain_id: int | None = None,
                tau: float | None = None, w_up=None, query=None) -> dict:
        if w_up is None:
            w_up = self.encoder.bypass.spec(self.encoder.adapter_index(domain_id))
        if query is None:
            query = self.decoder.query(domain_id)
        tau = self.cfg.tau if tau is None else tau
        enc = self.encoder(images, w_up=w_up)
        fg_logits = self.spgen(enc.per_layer)
        g_hat = gate(fg_logits, tau)
        logits = self.decoder(enc.final, g_hat, size=tuple(images.shape[-2:]), query=query)
        return {"logits": logits, "fg_logits": fg_logits, "g_hat": g_hat,
                "retained": retained_tokens(fg_logits, tau)}


def build_model(cfg: RunConfig, num_domains: int, seed: int | None = None) -> UNSAM:
    seed_all(cfg.seed if seed is None else seed)
    return UNSAM(cfg, num_domains)


def to_batch(samples, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples])).to(dtype)
    masks = torch.from_numpy(np.stack([s.semantic_mask for s in samples])).to(dtype)
    return images, masks


@dataclass
class TrainState:
    model: UNSAM
    registry: DomainRegistry
    optimizer: torch.optim.Optimizer | None = None
    scheduler: torch.optim.lr_scheduler.LRScheduler | None = None
    optimizer_domain: int | None = None
    domain: int = 0
    epoch: int = 0
    steps: int = 0
    generator: torch.Generator = field(default_factory=torch.Generator)
    log_rows: list[dict] = field(default_factory=list)
    common_at_entry: dict[int, torch.Tensor] = field(default_factory=dict)

    @property
    def cfg(self) -> RunConfig:
        return self.model.cfg

    @property
    def lr(self) -> float:
        if self.optimizer is None:
            return self.cfg.lr
        return self.optimizer.param_groups[0]["lr"]


def init_state(cfg: RunConfig, registry: DomainRegistry) -> TrainState:
    model = build_model(cfg, registry.K)
    gen = torch.Generator()
    gen.manual_seed(cfg.seed)
    return TrainState(model, registry, generator=gen)


def make_optimizer(state: TrainState, domain_id: int) -> None:
    cfg = state.cfg
    params = list(state.model.trainable_parameters(domain_id).values())
    state.optimizer = torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.adam_beta1, cfg.adam_beta2))
    state.scheduler = torch.optim.lr_scheduler.ExponentialLR(state.optimizer, gamma=cfg.lr_decay)
    state.optimizer_domain = domain_id
    audit_update_set(state)


def audit_update_set(state: TrainState) -> None:
    """Fail loudly if a frozen tensor ever sits in the optimizer's update set."""
    frozen = {id(p) for p in state.model.frozen_parameters().values()}
    updated = {id(p) for g in state.optimizer.param_groups for p in g["params"]}
    if frozen & updated:
        raise TrainingError("frozen backbone parameters found in the optimizer update set")
    if any(p.requires_grad for p in state.model.frozen_parameters().values()):
        raise TrainingError("a frozen backbone parameter has requires_grad set")


def compute_losses(model: UNSAM, images, masks, domain_id: int):
    cfg = model.cfg
    out = model(images, domain_id)
    prob = torch.sigmoid(out["logits"][:, 0])
    seg, focal, dice = seg_loss(prob, masks, cfg.lam, cfg.focal_gamma, cfg.focal_alpha,
                                cfg.dice_eps, return_terms=True)
    y = downsample_gt(masks, out["fg_logits"].shape[-2:])
    sp = spgen_loss(out["fg_logits"], y)
    return seg + sp, {"focal": focal, "dice": dice, "seg": seg, "spgen": sp}, out


def train_step(batch, domain_id: int, state: TrainState) -> LossReport:
    """One Adam step on a batch (list of samples or an ``(images, masks)`` pair)."""
    if isinstance(batch, (list, tuple)) and batch and isinstance(batch[0], ImageSample):
        if any(s.domain_id != domain_id for s in batch):
            raise ValidationError(f"batch contains samples outside domain {domain_id}")
        batch = to_batch(batch, state.cfg.torch_dtype)
    images, masks = batch
    if state.optimizer is None or state.optimizer_domain != domain_id:
        make_optimizer(state, domain_id)
    model = state.model
    model.train()
    total, terms, out = compute_losses(model, images, masks, domain_id)
    if not torch.isfinite(total):
        diagnostics = {
            "domain": domain_id, "epoch": state.epoch, "step": state.steps,
            **{k: float(v.detach()) for k, v in terms.items()},
            "param_norms": {n: float(p.detach().norm())
                            for n, p in model.trainable_parameters(domain_id).items()},
        }
        raise TrainingError(f"non-finite loss at step {state.steps}: {diagnostics}", diagnostics)
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.steps += 1
    return LossReport(total=float(total.detach()), retained=out["retained"],
                      **{k: float(v.detach()) for k, v in terms.items()})


def train_domain(k: int, dataset: Dataset, state: TrainState, epochs: int | None = None) -> TrainState:
    cfg = state.cfg
    epochs = cfg.epochs if epochs is None else epochs
    samples = list(dataset)
    if not samples:
        raise ValidationError(f"domain {k}: empty training set")
    if any(s.domain_id != k for s in samples):
        raise ValidationError(f"domain {k}: dataset holds samples of another domain")
    images, masks = to_batch(samples, cfg.torch_dtype)
    state.domain, state.epoch = k, 0
    state.common_at_entry[k] = state.model.encoder.bypass.w_com.detach().clone()
    if cfg.reset_optimizer_per_domain or state.optimizer is None:
        make_optimizer(state, k)
    for epoch in range(epochs):
        audit_update_set(state)
        order = torch.randperm(len(samples), generator=state.generator)
        sums = {c: 0.0 for c in ("focal", "dice", "seg", "spgen", "total")}
        retained, n_batches = 0, 0
        for start in range(0, len(samples), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            report = train_step((images[idx], masks[idx]), k, state)
            for c in sums:
                sums[c] += getattr(report, c)
            retained += report.retained
            n_batches += 1
        row = {"epoch": epoch + 1, "domain": k,
               **{c: v / n_batches for c, v in sums.items()},
               "retained_tokens": retained, "lr": state.lr}
        state.log_rows.append(row)
        state.scheduler.step()
        state.epoch = epoch + 1
        log.info("domain %d epoch %d total %.4f", k, epoch + 1, row["total"])
    if k not in state.model.trained_domains:
        state.model.trained_domains.append(k)
    return state


def train_all(registry: DomainRegistry, datasets, cfg: RunConfig, checkpoint_path=None,
              log_path=None, state: TrainState | None = None) -> TrainState:
    """Train every domain in registry order, inheriting ``w_com`` at each boundary."""
    if len(datasets) != registry.K:
        raise ConfigError(f"{registry.K} domains but {len(datasets)} datasets")
    state = state or init_state(cfg, registry)
    for k in range(registry.K):
        ds = datasets[k]
        train_domain(k, ds.train if isinstance(ds, Dataset) else ds, state)
        if k < registry.K - 1:
            state.model.encoder.inherit_common(k)
    if log_path is not None:
        write_log(state.log_rows, log_path)
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    return state


def write_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({c: row[c] for c in LOG_COLUMNS})


@dataclass
class Prediction:
    semantic: np.ndarray      # H x W bool
    instances: np.ndarray     # H x W int labels
    logits: np.ndarray        # H x W
    retained: int

    @property
    def probability(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits))


def _model_of(obj) -> UNSAM:
    return obj.model if isinstance(obj, TrainState) else obj


@torch.no_grad()
def predict_batch(model, images: np.ndarray, domain_id: int | None = None,
                  strategy: str = "specified", tau: float | None = None) -> list[Prediction]:
    model = _model_of(model)
    cfg = model.cfg
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    p = cfg.patch_size
    if images.shape[-1] % p or images.shape[-2] % p:
        raise ShapeError(f"image size {images.shape[-2:]} not divisible by patch {p}")
    w_up, query = model.inference_weights(domain_id, strategy)
    model.eval()
    x = torch.from_numpy(images).to(cfg.torch_dtype)
    out = model(x, tau=tau, w_up=w_up, query=query)
    logits = out["logits"][:, 0].numpy()
    preds = []
    for i, lg in enumerate(logits):
        # sigmoid(l) >= 0.5 <=> l >= logit(threshold); 0.5 itself counts as foreground
        prob = torch.sigmoid(torch.from_numpy(lg)).numpy()
        semantic = prob >= np.asarray(cfg.semantic_threshold, dtype=prob.dtype)
        retained = retained_tokens(out["fg_logits"][i], cfg.tau if tau is None else tau)
        preds.append(Prediction(semantic, connected_components(semantic, cfg.connectivity),
                                lg, retained))
    return preds


def predict(model, image: np.ndarray, domain_id: int | None = None,
            strategy: str = "specified", tau: float | None = None) -> Prediction:
    """Prompt-free inference on one C x H x W image."""
    return predict_batch(model, image, domain_id, strategy, tau)[0]


def evaluate(model, dataset, domain_id: int | None = None, strategy: str = "specified",
             gt_as_prediction: bool = False, batch_size: int = 8) -> MetricsReport:
    samples = list(dataset)
    if not samples:
        raise ValidationError("cannot evaluate on an empty dataset")
    pairs = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        if gt_as_prediction:
            preds = [s.instance_map for s in chunk]
        else:
            images = np.stack([s.image for s in chunk])
            preds = [p.instances for p in predict_batch(model, images, domain_id, strategy)]
        pairs += [(s.instance_map, p) for s, p in zip(chunk, preds)]
    ids = [s.sample_id or str(i) for i, s in enumerate(samples)]
    return MetricsReport.from_pairs(pairs, ids)


# --- checkpoints -------------------------------------------------------------------------

def _npz_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    """npz archive with fixed entry timestamps, so equal arrays give equal bytes."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, value in arrays.items():
            entry = io.BytesIO()
            np.lib.format.write_array(entry, np.asanyarray(value), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)),
                        entry.getvalue())
    return buf.getvalue()


def _state_arrays(model: UNSAM) -> dict[str, np.ndarray]:
    return {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}


def save_checkpoint(state: TrainState, path) -> Path:
    """Write ``magic | version | sha256(payload) | payload`` with an npz payload."""
    model = state.model
    frozen = set(model.frozen_parameters())
    meta = {
        "config": model.cfg.to_dict(),
        "registry": list(state.registry.names),
        "trained_domains": list(model.trained_domains),
        "cursor": {"domain": state.domain, "epoch": state.epoch, "steps": state.steps},
        "flags": {n: ("frozen" if n in frozen else "trainable")
                  for n, _ in model.named_parameters()},
        "common_history": sorted(model.encoder.bypass.common_history),
    }
    arrays = {f"param/{n}": a for n, a in _state_arrays(model).items()}
    for k, t in model.encoder.bypass.common_history.items():
        arrays[f"common_history/{k}"] = t.numpy()
    arrays["rng"] = state.generator.get_state().numpy()
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    payload = _npz_bytes(arrays)
    path = Path(path)
    path.write_bytes(CHECKPOINT_MAGIC + struct.pack("<I", CHECKPOINT_VERSION)
                     + hashlib.sha256(payload).digest() + payload)
    return path


def load_checkpoint(path, registry: DomainRegistry | None = None) -> TrainState:
    raw = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC)
    if len(raw) < head + 4 + 32 or not raw.startswith(CHECKPOINT_MAGIC):
        raise IntegrityError(f"{path}: not a checkpoint or truncated header")
    (version,) = struct.unpack("<I", raw[head:head + 4])
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    digest, payload = raw[head + 4:head + 36], raw[head + 36:]
    if hashlib.sha256(payload).digest() != digest:
        raise IntegrityError(f"{path}: payload digest mismatch (truncated or corrupted)")
    with np.load(io.BytesIO(payload)) as npz:
        arrays = {k: npz[k] for k in npz.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    saved_registry = DomainRegistry(tuple(meta["registry"]))
    if registry is not None and registry.K != saved_registry.K:
        raise IncompatibleCheckpointError(
            f"{path}: trained for K={saved_registry.K} domains, asked for K={registry.K}"
        )
    cfg = RunConfig.from_dict(meta["config"])
    model = UNSAM(cfg, saved_registry.K)
    state_dict = {n[len("param/"):]: torch.from_numpy(a.copy())
                  for n, a in arrays.items() if n.startswith("param/")}
    try:
        model.load_state_dict(state_dict, strict=True)
    except RuntimeError as exc:
        raise IncompatibleCheckpointError(f"{path}: {exc}") from exc
    model.trained_domains = list(meta["trained_domains"])
    for k in meta["common_history"]:
        model.encoder.bypass.common_history[int(k)] = torch.from_numpy(
            arrays[f"common_history/{k}"].copy())
    gen = torch.Generator()
    gen.set_state(torch.from_numpy(arrays["rng"].copy()))
    cursor = meta["cursor"]
    return TrainState(model, registry or saved_registry, domain=cursor["domain"],
                      epoch=cursor["epoch"], steps=cursor["steps"], generator=gen)
