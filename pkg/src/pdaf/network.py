"""PDAF speaker model: attention stack, pooling, embedding head, classifier.

The model consumes log-mel frames with per-frame phoneme labels.  Which
local-probability estimate feeds the attention debias depends on the
configured estimator and on the phase: corpus-level estimators are used in
training and swapped for their utterance-level counterpart at inference.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import gradcore as gc
from . import priors as pr
from .attention import AttentiveStatsPool, BlockConfig, DebiasedAttentionBlock, ones, uniform_init, zeros
from .gradcore import Tensor
from .phonetics import INVENTORY, AlignmentSegment, PhonemeInventory, build_key_mask

log = logging.getLogger(__name__)

CKPT_MAGIC = b"PDAF-CK1"
CKPT_VERSION = 1

# estimator -> (train-phase table, inference-phase table)
PAIRINGS: dict[str, tuple[str | None, str | None]] = {
    "baseline": (None, None),
    "pop": ("POP", "PUP"),
    "pfp": ("PFP", "FUP"),
    "pup": ("PUP", "PUP"),
    "fup": ("FUP", "FUP"),
    "learned": ("LEARNED", "LEARNED"),
    "uniform": ("UNIFORM", "UNIFORM"),
}


class CheckpointError(ValueError):
    pass


class InventoryMismatchError(ValueError):
    pass


class SkipUtterance(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Utterance:
    utt_id: str
    speaker: str
    frames: np.ndarray  # [T, n_mels]
    labels: np.ndarray  # [T] inventory indices
    segments: list[AlignmentSegment] = field(default_factory=list)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass
class ModelConfig:
    n_speakers: int
    n_mels: int = 128
    block: BlockConfig = field(default_factory=BlockConfig)
    d_emb: int = 1024
    estimator: str = "pup"
    lam: float = 1.0
    floor: float = pr.DEFAULT_FLOOR
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.block, dict):
            self.block = BlockConfig(**self.block)
        if self.n_speakers < 2:
            raise ValueError("need at least 2 speakers")
        if self.estimator not in PAIRINGS:
            raise ValueError(f"unknown estimator {self.estimator!r}; choose from {sorted(PAIRINGS)}")
        if self.estimator == "baseline":
            self.lam = 0.0
        if self.n_mels != self.block.d_model:
            raise ValueError("n_mels must equal d_model (frames feed the attention stack directly)")

    def to_json(self) -> dict:
        d = asdict(self)
        d["block"] = asdict(self.block)
        return d


@dataclass
class TrainConfig:
    lr: float = 0.001
    halve_every: int = 4
    warmup_steps: int = 2000
    weight_decay: float = 1e-7
    batch_size: int = 100
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "halve_every", "batch_size", "epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.warmup_steps < 0 or self.weight_decay < 0:
            raise ValueError("warmup_steps and weight_decay must be non-negative")


def lr_multiplier(step: int, epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup over ``warmup_steps`` updates, halved every ``halve_every`` epochs.

    ``step`` counts updates from 1, ``epoch`` from 0.
    """
    warm = min(1.0, step / cfg.warmup_steps) if cfg.warmup_steps else 1.0
    return warm * 0.5 ** (epoch // cfg.halve_every)


@dataclass
class SpeakerEmbedding:
    utt_id: str
    vector: np.ndarray
    fingerprint: str


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    lr: float
    steps: int


class PdafModel:
    def __init__(
        self,
        cfg: ModelConfig,
        speakers: Sequence[str] | None = None,
        counts: pr.CorpusCounts | None = None,
        inventory: PhonemeInventory = INVENTORY,
    ):
        self.cfg = cfg
        self.inventory = inventory
        self.speakers = list(speakers) if speakers is not None else [f"spk{i}" for i in range(cfg.n_speakers)]
        if len(self.speakers) != cfg.n_speakers:
            raise ValueError("speaker list length differs from n_speakers")
        self.counts = counts
        self.feature_fingerprint: str | None = None
        rng = np.random.default_rng(cfg.seed)
        b = cfg.block
        self.blocks = [DebiasedAttentionBlock(b, rng, prefix=f"block{i}") for i in range(b.n_blocks)]
        self.pool = AttentiveStatsPool(b.d_model, rng)
        self.head = {
            "head.w": uniform_init(rng, 2 * b.d_model, (2 * b.d_model, cfg.d_emb)),
            "head.b": zeros(cfg.d_emb),
            "head.bn_g": ones(cfg.d_emb),
            "head.bn_b": zeros(cfg.d_emb),
        }
        self.bn_state = gc.BatchNormState.fresh(cfg.d_emb)
        self.classifier = {
            "cls.w": uniform_init(rng, cfg.d_emb, (cfg.d_emb, cfg.n_speakers)),
            "cls.b": zeros(cfg.n_speakers),
        }
        self.learned = pr.LearnedPhonemeWeights.zeros(len(inventory)) if cfg.estimator == "learned" else None
        self.rng = np.random.default_rng(cfg.seed + 1)
        self.train_table = self._corpus_table()

    # -- parameters ---------------------------------------------------------

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for blk in self.blocks:
            out.update(blk.named_params())
        out.update(self.pool.named_params())
        out.update(self.head)
        out.update(self.classifier)
        if self.learned is not None:
            out["learned.logits"] = self.learned.logits
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_params().values())

    def fingerprint(self) -> str:
        h = hashlib.sha256(json.dumps(self.cfg.to_json(), sort_keys=True).encode())
        for name, p in sorted(self.named_params().items()):
            h.update(name.encode())
            h.update(p.data.tobytes())
        h.update(self.bn_state.running_mean.tobytes())
        h.update(self.bn_state.running_var.tobytes())
        return h.hexdigest()[:16]

    # -- debias -------------------------------------------------------------

    def _corpus_table(self) -> pr.PriorTable | None:
        kind = PAIRINGS[self.cfg.estimator][0]
        if kind in ("POP", "PFP"):
            if self.counts is None:
                return None
            return pr.pop(self.counts, self.cfg.floor) if kind == "POP" else pr.pfp(self.counts, self.cfg.floor)
        return None

    def set_counts(self, counts: pr.CorpusCounts) -> None:
        self.counts = counts
        self.train_table = self._corpus_table()

    def prior_table(self, utt: Utterance, phase: str):
        kind = PAIRINGS[self.cfg.estimator][0 if phase == "train" else 1]
        if kind is None:
            return None
        if kind in ("POP", "PFP"):
            if self.train_table is None:
                raise ValueError(f"estimator {self.cfg.estimator!r} needs corpus counts; call set_counts()")
            return self.train_table
        if kind == "PUP":
            return pr.pup(utt.segments, self.cfg.floor)
        if kind == "FUP":
            return pr.fup(utt.labels, self.cfg.floor)
        if kind == "UNIFORM":
            return pr.uniform(self.cfg.floor, self.inventory)
        return self.learned

    def debias(self, utt: Utterance, phase: str):
        table = self.prior_table(utt, phase)
        if table is None:
            return np.zeros(utt.n_frames)
        return pr.frame_bias(table, utt.labels, self.cfg.lam)

    # -- forward ------------------------------------------------------------

    def _collate(self, utts: Sequence[Utterance], phase: str, masks: Sequence[np.ndarray] | None):
        if not utts:
            raise SkipUtterance("empty batch")
        T = max(u.n_frames for u in utts)
        if T == 0:
            raise SkipUtterance("utterance has no frames")
        B, d = len(utts), self.cfg.n_mels
        x = np.zeros((B, T, d))
        key_mask = np.zeros((B, T), dtype=bool)
        for i, u in enumerate(utts):
            if u.n_frames == 0:
                raise SkipUtterance(f"{u.utt_id}: no frames")
            x[i, : u.n_frames] = u.frames
            m = build_key_mask(u.labels, inventory=self.inventory) if masks is None else np.asarray(masks[i], bool)
            if not m.any():
                raise SkipUtterance(f"{u.utt_id}: no attendable frames")
            key_mask[i, : u.n_frames] = m
        if self.learned is not None:
            pad = np.full((B, T), self.inventory.sil, dtype=np.int64)
            for i, u in enumerate(utts):
                pad[i, : u.n_frames] = u.labels
            bias = gc.reshape(gc.take(self.learned.logits, pad.reshape(-1)), (B, T))
        else:
            bias = np.zeros((B, T))
            for i, u in enumerate(utts):
                bias[i, : u.n_frames] = self.debias(u, phase)
        return gc.Tensor(x), bias, key_mask

    def embed_batch(self, utts: Sequence[Utterance], phase: str = "infer", masks=None) -> Tensor:
        x, bias, key_mask = self._collate(utts, phase, masks)
        h = x
        for blk in self.blocks:
            h = blk(h, bias, key_mask)
        pooled = self.pool(h, key_mask)
        z = gc.linear(pooled, self.head["head.w"], self.head["head.b"])
        mode = "train" if phase == "train" else "infer"
        z = gc.batchnorm(z, self.head["head.bn_g"], self.head["head.bn_b"], self.bn_state, mode=mode)
        return gc.relu(z)

    def logits(self, emb: Tensor) -> Tensor:
        return gc.linear(emb, self.classifier["cls.w"], self.classifier["cls.b"])

    def forward(self, utts: Sequence[Utterance], phase: str = "infer", masks=None):
        """Return ``(embeddings [B, d_emb], posteriors [B, n_speakers])`` as Tensors."""
        emb = self.embed_batch(utts, phase, masks)
        post = gc.softmax_lastdim(self.logits(emb))
        return emb, post

    def embed(self, utt: Utterance, mask: np.ndarray | None = None) -> SpeakerEmbedding:
        emb = self.embed_batch([utt], "infer", None if mask is None else [mask])
        return SpeakerEmbedding(utt.utt_id, emb.data[0].copy(), self.fingerprint())

    # -- checkpoints ----------------------------------------------------------

    def save(self, path, extra: dict | None = None) -> None:
        names = sorted(self.named_params())
        params = self.named_params()
        header = {
            "version": CKPT_VERSION,
            "model": self.cfg.to_json(),
            "speakers": self.speakers,
            "inventory": self.inventory.to_json(),
            "counts": None if self.counts is None else self.counts.to_json(),
            "feature_fingerprint": self.feature_fingerprint,
            "rng_state": self.rng.bit_generator.state,
            "params": [[n, list(params[n].shape)] for n in names],
            "bn": {"momentum": self.bn_state.momentum, "eps": self.bn_state.eps},
            "fingerprint": self.fingerprint(),
            "extra": extra or {},
        }
        hb = json.dumps(header, sort_keys=True).encode()
        blobs = [params[n].data.astype("<f8").tobytes() for n in names]
        blobs.append(self.bn_state.running_mean.astype("<f8").tobytes())
        blobs.append(self.bn_state.running_var.astype("<f8").tobytes())
        Path(path).write_bytes(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(hb)) + hb + b"".join(blobs))

    @classmethod
    def load(cls, path) -> "PdafModel":
        raw = Path(path).read_bytes()
        if raw[:8] != CKPT_MAGIC:
            raise CheckpointError(f"{path}: not a PDAF checkpoint (bad magic / version)")
        if len(raw) < 16:
            raise CheckpointError(f"{path}: truncated header")
        version, hlen = struct.unpack_from("<II", raw, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
        if len(raw) < 16 + hlen:
            raise CheckpointError(f"{path}: truncated header")
        header = json.loads(raw[16 : 16 + hlen])
        inv = PhonemeInventory.from_json(header["inventory"])
        counts = None if header["counts"] is None else pr.CorpusCounts.from_json(header["counts"])
        model = cls(ModelConfig(**header["model"]), header["speakers"], counts, inv)
        params = model.named_params()
        off = 16 + hlen
        for name, shape in header["params"]:
            n = int(np.prod(shape)) * 8
            if off + n > len(raw):
                raise CheckpointError(f"{path}: truncated at parameter {name}")
            params[name].data = np.frombuffer(raw, "<f8", count=n // 8, offset=off).reshape(shape).copy()
            off += n
        d = model.cfg.d_emb
        if off + 16 * d != len(raw):
            raise CheckpointError(f"{path}: truncated or trailing bytes in batchnorm section")
        model.bn_state = gc.BatchNormState(
            np.frombuffer(raw, "<f8", d, off).copy(),
            np.frombuffer(raw, "<f8", d, off + 8 * d).copy(),
            header["bn"]["momentum"],
            header["bn"]["eps"],
        )
        model.feature_fingerprint = header["feature_fingerprint"]
        model.rng.bit_generator.state = header["rng_state"]
        model.extra = header.get("extra", {})
        return model

    def check_inventory(self, inventory: PhonemeInventory) -> None:
        if tuple(inventory.symbols) != tuple(self.inventory.symbols):
            raise InventoryMismatchError("phoneme inventory differs from the one frozen in the checkpoint")


# --------------------------------------------------------------------------
# training


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def train_step(model: PdafModel, batch: Sequence[Utterance], targets: np.ndarray):
    params = model.parameters()
    for p in params:
        p.grad = None
    emb = model.embed_batch(batch, "train")
    logits = model.logits(emb)
    loss = gc.cross_entropy(logits, targets)
    gc.backward(loss)
    correct = int((logits.data.argmax(axis=1) == targets).sum())
    return loss.item(), correct, [p.grad for p in params]


def train(
    model: PdafModel,
    data: Sequence[Utterance],
    cfg: TrainConfig,
    checkpoint_dir=None,
    metrics_path=None,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
) -> list[EpochMetrics]:
    """Minimise speaker cross-entropy; returns per-epoch metrics."""
    spk_index = {s: i for i, s in enumerate(model.speakers)}
    per_spk: dict[str, int] = {}
    for u in data:
        if u.speaker not in spk_index:
            raise ValueError(f"utterance {u.utt_id}: speaker {u.speaker!r} not in model")
        per_spk[u.speaker] = per_spk.get(u.speaker, 0) + 1
    thin = sorted(s for s, n in per_spk.items() if n < 2)
    if thin:
        raise ValueError(f"speakers with fewer than 2 training utterances: {thin}")
    if PAIRINGS[model.cfg.estimator][0] in ("POP", "PFP") and model.counts is None:
        model.set_counts(pr.CorpusCounts.from_corpus((u.segments, u.labels) for u in data))

    steps_per_epoch = len(make_batches(len(data), cfg.batch_size, np.random.default_rng(0)))
    if cfg.warmup_steps > steps_per_epoch * cfg.epochs:
        raise ValueError(
            f"warmup_steps={cfg.warmup_steps} exceeds the {steps_per_epoch * cfg.epochs} total steps of this run"
        )
    targets_all = np.array([spk_index[u.speaker] for u in data])
    params = model.parameters()
    opt = gc.AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    history: list[EpochMetrics] = []
    best = math.inf
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir:
        ckdir.mkdir(parents=True, exist_ok=True)
    mfh = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(cfg.epochs):
            tot_loss = 0.0
            tot_correct = 0
            seen = 0
            for idx in make_batches(len(data), cfg.batch_size, rng):
                step += 1
                mult = lr_multiplier(step, epoch, cfg)
                batch = [data[i] for i in idx]
                try:
                    loss, correct, grads = train_step(model, batch, targets_all[idx])
                    gc.adam_step(params, grads, opt, cfg.lr, cfg.weight_decay, lr_mult=mult)
                except gc.NonFiniteError as exc:
                    ids = [u.utt_id for u in batch]
                    raise TrainingDiverged(f"non-finite values at step {step} (lr={cfg.lr * mult:.3g}, batch={ids}): {exc}") from exc
                tot_loss += loss * len(idx)
                tot_correct += correct
                seen += len(idx)
            m = EpochMetrics(epoch + 1, tot_loss / seen, tot_correct / seen, cfg.lr * mult, step)
            history.append(m)
            log.info("epoch %d loss %.4f acc %.3f lr %.2e", m.epoch, m.loss, m.accuracy, m.lr)
            if mfh:
                mfh.write(json.dumps(asdict(m)) + "\n")
                mfh.flush()
            if ckdir:
                model.save(ckdir / f"epoch{m.epoch:03d}.ckpt")
                if m.loss < best:
                    best = m.loss
                    model.save(ckdir / "best.ckpt")
            if on_epoch:
                on_epoch(m)
    finally:
        if mfh:
            mfh.close()
    return history


def with_estimator(cfg: ModelConfig, estimator: str, lam: float | None = None) -> ModelConfig:
    return replace(cfg, estimator=estimator, lam=cfg.lam if lam is None else lam)
