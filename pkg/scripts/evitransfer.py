#!/usr/bin/env python3
"""
Evidence transfer on a denoising stacked autoencoder.

Two steps share one training loop:

1. ``train_init`` - unsupervised reconstruction of the primary data under the
   SSIM loss, with zero-masking input corruption. No evidence is consulted.
2. ``train_transfer`` - continues from the initialised model with softmax heads
   attached to the latent layer, minimising reconstruction loss plus the
   lambda-weighted mean cross-entropy against each evidence source.

``screen_evidence`` is the optional intermediate step: a small model trained
for a deliberately limited number of iterations from the data to one evidence
source. Evidence unrelated to the data cannot be fitted in that budget and
leaves near-uniform predictions, which the entropy ratio detects.
"""

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from errors import (AlignmentError, ConfigurationError, DataLoadError, DegenerateEvidenceError,
                    DivergenceError, ScreeningInconclusiveError, ShapeError)
from losses import (LOG_CLIP, SsimConfig, TransferConfig, check_one_hot, evidence_transfer_loss,
                    softmax_cross_entropy, ssim_loss)
from tensor_net import (Activation, AdamState, DenseLayer, adam_step, as_matrix, backward_stack,
                        dense_forward, forward_stack, glorot_layer, linear_backward)

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "evitransfer-checkpoint"
CHECKPOINT_VERSION = 1


# ============================================================================
# Configuration
# ============================================================================

class AutoencoderConfig(BaseModel):
    """Encoder widths; the decoder mirrors them."""
    hidden_dims: List[int] = Field(default_factory=lambda: [512, 256])
    latent_dim: int = Field(10, ge=1)
    corruption_rate: float = Field(0.2, ge=0, lt=1)
    output_activation: Activation = Activation.SIGMOID


class TrainConfig(BaseModel):
    """Budget and optimizer settings for one training step."""
    epochs: int = Field(100, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, gt=0)
    seed: int = 0
    corrupt: bool = True
    ssim: SsimConfig = Field(default_factory=SsimConfig)


class ScreeningConfig(BaseModel):
    """Biased evidence model: small, iteration-limited."""
    budget: int = Field(50, ge=0)
    threshold: float = Field(0.9, gt=0, le=1)
    latent_dim: int = Field(2, ge=1)
    lr: float = Field(0.05, gt=0)
    seed: int = 0


# ============================================================================
# Domain types
# ============================================================================

@dataclass
class EvidenceHead:
    """Softmax layer on the latent space for one evidence source."""
    name: str
    layer: DenseLayer

    def __post_init__(self):
        if self.layer.activation is not Activation.SOFTMAX:
            raise ShapeError(f"evidence head '{self.name}' must use softmax")


@dataclass
class EvidenceSet:
    """K one-hot evidence sources, row-aligned with the feature matrix."""
    sources: List[np.ndarray]
    names: List[str]

    def __post_init__(self):
        if len(self.sources) != len(self.names):
            raise ConfigurationError("every evidence source needs exactly one name")
        if len(set(self.names)) != len(self.names):
            raise ConfigurationError(f"duplicate evidence source names: {self.names}")
        self.sources = [check_one_hot(v, f"evidence '{n}'") for v, n in zip(self.sources, self.names)]
        rows = {v.shape[0] for v in self.sources}
        if len(rows) > 1:
            raise AlignmentError(f"evidence sources have different row counts: {sorted(rows)}")

    @classmethod
    def from_labels(cls, labels: Sequence[Sequence[int]], names: Sequence[str],
                    n_classes: Optional[Sequence[int]] = None) -> "EvidenceSet":
        """Build one-hot sources from integer class ids (binary by default)."""
        sources = []
        for j, lab in enumerate(labels):
            lab = np.asarray(lab, dtype=np.int64)
            c = n_classes[j] if n_classes is not None else max(2, int(lab.max()) + 1)
            sources.append(np.eye(c, dtype=np.float64)[lab])
        return cls(sources=sources, names=list(names))

    @property
    def k(self) -> int:
        return len(self.sources)

    @property
    def n_rows(self) -> int:
        return self.sources[0].shape[0] if self.sources else 0

    def subset(self, rows: np.ndarray) -> "EvidenceSet":
        return EvidenceSet([v[rows] for v in self.sources], list(self.names))

    def select(self, names: Sequence[str]) -> "EvidenceSet":
        keep = [self.names.index(n) for n in names]
        return EvidenceSet([self.sources[i] for i in keep], list(names))


@dataclass
class AutoencoderModel:
    encoder_layers: List[DenseLayer]
    decoder_layers: List[DenseLayer]
    corruption_rate: float = 0.2
    heads: List[EvidenceHead] = field(default_factory=list)
    initialized: bool = False

    def __post_init__(self):
        if not self.encoder_layers or not self.decoder_layers:
            raise ShapeError("autoencoder needs at least one encoder and one decoder layer")
        if not 0 <= self.corruption_rate < 1:
            raise ConfigurationError(f"corruption rate must be in [0, 1), got {self.corruption_rate}")
        enc = [self.encoder_layers[0].in_dim] + [l.out_dim for l in self.encoder_layers]
        dec = [self.decoder_layers[0].in_dim] + [l.out_dim for l in self.decoder_layers]
        if dec != enc[::-1]:
            raise ShapeError(f"decoder widths {dec} do not mirror encoder widths {enc}")

    @property
    def input_dim(self) -> int:
        return self.encoder_layers[0].in_dim

    @property
    def latent_dim(self) -> int:
        return self.encoder_layers[-1].out_dim

    def ae_params(self) -> Dict[str, np.ndarray]:
        params: Dict[str, np.ndarray] = {}
        for i, layer in enumerate(self.encoder_layers):
            params.update(layer.params(f"enc{i}"))
        for i, layer in enumerate(self.decoder_layers):
            params.update(layer.params(f"dec{i}"))
        return params

    def head_params(self) -> Dict[str, np.ndarray]:
        params: Dict[str, np.ndarray] = {}
        for head in self.heads:
            params.update(head.layer.params(f"head.{head.name}"))
        return params


@dataclass
class TrainHistory:
    """Per-epoch mean losses."""
    ae: List[float] = field(default_factory=list)
    ce: Dict[str, List[float]] = field(default_factory=dict)
    total: List[float] = field(default_factory=list)


@dataclass
class ScreeningVerdict:
    source: str
    mean_entropy: float
    entropy_ratio: float
    threshold: float
    accepted: bool


@dataclass
class LossTerms:
    ae: float
    ce: List[float]
    total: float
    grads: Dict[str, np.ndarray]


# ============================================================================
# Construction
# ============================================================================

def build_autoencoder(input_dim: int, cfg: Optional[AutoencoderConfig] = None,
                      seed: int = 0) -> AutoencoderModel:
    """Glorot-initialised encoder D -> hidden... -> latent and its mirror."""
    cfg = cfg or AutoencoderConfig()
    rng = np.random.default_rng(seed)
    widths = [input_dim] + list(cfg.hidden_dims) + [cfg.latent_dim]
    encoder = []
    for i in range(len(widths) - 1):
        act = Activation.LINEAR if i == len(widths) - 2 else Activation.RELU
        encoder.append(glorot_layer(widths[i], widths[i + 1], act, rng))
    back = widths[::-1]
    decoder = []
    for i in range(len(back) - 1):
        act = cfg.output_activation if i == len(back) - 2 else Activation.RELU
        decoder.append(glorot_layer(back[i], back[i + 1], act, rng))
    return AutoencoderModel(encoder, decoder, corruption_rate=cfg.corruption_rate)


def attach_evidence_heads(model: AutoencoderModel, evidence: EvidenceSet,
                          seed: int = 0) -> AutoencoderModel:
    """Return a copy of ``model`` with one fresh softmax head per evidence source."""
    if len(set(evidence.names)) != len(evidence.names):
        raise ConfigurationError(f"duplicate evidence source names: {evidence.names}")
    rng = np.random.default_rng(seed)
    out = copy.deepcopy(model)
    out.heads = [
        EvidenceHead(name, glorot_layer(model.latent_dim, v.shape[1], Activation.SOFTMAX, rng, head=True))
        for name, v in zip(evidence.names, evidence.sources)
    ]
    return out


# ============================================================================
# Forward passes
# ============================================================================

def corrupt_input(batch: np.ndarray, rate: float,
                  seed: Union[int, np.random.Generator, None] = None) -> np.ndarray:
    """Zero-mask each entry independently with probability ``rate``."""
    if not 0 <= rate < 1:
        raise ConfigurationError(f"corruption rate must be in [0, 1), got {rate}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    batch = np.asarray(batch, dtype=np.float64)
    keep = rng.random(batch.shape) >= rate
    return batch * keep


def _check_data(model: AutoencoderModel, data: np.ndarray) -> np.ndarray:
    data = as_matrix(data, "data")
    if data.shape[1] != model.input_dim:
        raise ShapeError(f"data has {data.shape[1]} columns, model expects {model.input_dim}")
    return data


def encode(model: AutoencoderModel, data: np.ndarray) -> np.ndarray:
    """Latent representation (N x latent_dim); encoder only, no corruption."""
    return forward_stack(model.encoder_layers, _check_data(model, data))[-1]


def reconstruct(model: AutoencoderModel, data: np.ndarray) -> np.ndarray:
    return forward_stack(model.decoder_layers, encode(model, data))[-1]


def reconstruction_loss(model: AutoencoderModel, data: np.ndarray,
                        ssim_cfg: Optional[SsimConfig] = None) -> float:
    data = _check_data(model, data)
    loss, _ = ssim_loss(data, reconstruct(model, data), ssim_cfg)
    return loss


def predict_evidence(model: AutoencoderModel, data: np.ndarray) -> Dict[str, np.ndarray]:
    """Head probabilities Q_j for every attached head."""
    latent = encode(model, data)
    return {head.name: dense_forward(head.layer, latent) for head in model.heads}


def joint_objective(model: AutoencoderModel, inputs: np.ndarray, targets: np.ndarray,
                    ssim_cfg: SsimConfig, evidence: Optional[List[np.ndarray]] = None,
                    transfer: Optional[TransferConfig] = None) -> LossTerms:
    """
    Loss and gradients for one batch.

    Without evidence this is the initialisation loss (mean 1 - SSIM of the
    reconstruction of ``inputs`` against ``targets``). With evidence the
    heads' cross-entropies are added with weight lambda / K and their
    gradients flow back into the shared encoder.
    """
    enc_acts = forward_stack(model.encoder_layers, inputs)
    latent = enc_acts[-1]
    dec_acts = forward_stack(model.decoder_layers, latent)
    ae, grad_recon = ssim_loss(targets, dec_acts[-1], ssim_cfg)
    grads, grad_latent = backward_stack(model.decoder_layers, dec_acts, grad_recon, "dec")

    ce: List[float] = []
    total = ae
    if evidence:
        transfer = transfer or TransferConfig(evidence_count=len(evidence))
        weight = transfer.lam / transfer.evidence_count
        for head, v in zip(model.heads, evidence):
            q = dense_forward(head.layer, latent)
            loss, grad_logits = softmax_cross_entropy(v, q)
            ce.append(loss)
            if weight > 0:
                head_grads, g_latent = linear_backward(head.layer, latent, weight * grad_logits)
                grads.update(head_grads.named(f"head.{head.name}"))
                grad_latent = grad_latent + g_latent
            else:
                grads.update({k: np.zeros_like(p) for k, p in head.layer.params(f"head.{head.name}").items()})
        total = evidence_transfer_loss(ae, ce, transfer)

    enc_grads, _ = backward_stack(model.encoder_layers, enc_acts, grad_latent, "enc")
    grads.update(enc_grads)
    return LossTerms(ae=ae, ce=ce, total=total, grads=grads)


# ============================================================================
# Training
# ============================================================================

def _fit(model: AutoencoderModel, data: np.ndarray, cfg: TrainConfig,
         evidence: Optional[EvidenceSet] = None,
         transfer: Optional[TransferConfig] = None) -> TrainHistory:
    """Mini-batch Adam loop shared by both steps; mutates ``model``."""
    rng = np.random.default_rng(cfg.seed)
    n = data.shape[0]
    ae_params = model.ae_params()
    head_params = model.head_params() if evidence is not None else {}
    ae_state = AdamState(lr=cfg.lr)
    head_state = AdamState(lr=cfg.lr)
    history = TrainHistory(ce={name: [] for name in (evidence.names if evidence else [])})
    rate = model.corruption_rate if cfg.corrupt else 0.0

    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums = {"ae": 0.0, "total": 0.0}
        ce_sums = [0.0] * (evidence.k if evidence else 0)
        for start in range(0, n, cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            clean = data[rows]
            noisy = corrupt_input(clean, rate, rng) if rate > 0 else clean
            batch_evidence = [v[rows] for v in evidence.sources] if evidence else None
            terms = joint_objective(model, noisy, clean, cfg.ssim, batch_evidence, transfer)
            step += 1
            if not np.isfinite(terms.total):
                raise DivergenceError("training loss is not finite", step)
            adam_step(ae_state, ae_params, terms.grads)
            if head_params:
                adam_step(head_state, head_params, terms.grads)
            sums["ae"] += terms.ae * rows.size
            sums["total"] += terms.total * rows.size
            for j, value in enumerate(terms.ce):
                ce_sums[j] += value * rows.size

        history.ae.append(sums["ae"] / n)
        history.total.append(sums["total"] / n)
        for j, name in enumerate(history.ce):
            history.ce[name].append(ce_sums[j] / n)
        logger.debug("epoch %d: ae=%.6f total=%.6f", epoch, history.ae[-1], history.total[-1])
    return history


def train_init(model: AutoencoderModel, data: np.ndarray,
               cfg: Optional[TrainConfig] = None) -> Tuple[AutoencoderModel, TrainHistory]:
    """
    Initialisation step: reconstruct corrupted inputs to their clean targets.

    Returns:
        (trained copy of the model, loss history)
    """
    cfg = cfg or TrainConfig()
    data = _check_data(model, data)
    if data.shape[0] == 0:
        raise ShapeError("cannot train on an empty feature matrix")
    trained = copy.deepcopy(model)
    history = _fit(trained, data, cfg)
    trained.initialized = True
    if history.ae:
        logger.info("init step: %d epochs, ssim loss %.4f -> %.4f",
                    cfg.epochs, history.ae[0], history.ae[-1])
    return trained, history


def train_transfer(model: AutoencoderModel, data: np.ndarray, evidence: EvidenceSet,
                   transfer: TransferConfig,
                   cfg: Optional[TrainConfig] = None) -> Tuple[AutoencoderModel, TrainHistory]:
    """
    Transfer step: joint reconstruction + evidence cross-entropy.

    Returns:
        (trained copy of the model, loss history with one curve per source)
    """
    cfg = cfg or TrainConfig()
    data = _check_data(model, data)
    if not model.initialized:
        raise ConfigurationError("transfer step requires a model trained by the initialisation step")
    if evidence.n_rows != data.shape[0]:
        raise AlignmentError(f"evidence has {evidence.n_rows} rows, data has {data.shape[0]}")
    if [h.name for h in model.heads] != evidence.names:
        raise ConfigurationError(
            f"model heads {[h.name for h in model.heads]} do not match evidence {evidence.names}"
        )
    if transfer.evidence_count != evidence.k:
        raise ConfigurationError(f"transfer config expects K={transfer.evidence_count}, got {evidence.k}")
    for head, v in zip(model.heads, evidence.sources):
        if head.layer.out_dim != v.shape[1]:
            raise ShapeError(f"head '{head.name}' has {head.layer.out_dim} classes, evidence has {v.shape[1]}")

    trained = copy.deepcopy(model)
    history = _fit(trained, data, cfg, evidence, transfer)
    if history.total:
        logger.info("transfer step: %d epochs, lambda=%g, ae %.4f -> %.4f, ce %s",
                    cfg.epochs, transfer.lam, history.ae[0], history.ae[-1],
                    {k: round(v[-1], 4) for k, v in history.ce.items()})
    return trained, history


# ============================================================================
# Screening
# ============================================================================

def screen_evidence(evidence: np.ndarray, data: np.ndarray,
                    cfg: Optional[ScreeningConfig] = None,
                    name: str = "evidence") -> ScreeningVerdict:
    """
    Train a small, iteration-limited model from the data to one evidence
    source and measure how far its predictions are from uniform.

    Returns:
        ScreeningVerdict; accepted iff mean entropy / ln(classes) < threshold
    """
    cfg = cfg or ScreeningConfig()
    v = check_one_hot(evidence, f"evidence '{name}'")
    x = as_matrix(data, "data")
    if v.shape[0] != x.shape[0]:
        raise AlignmentError(f"evidence '{name}' has {v.shape[0]} rows, data has {x.shape[0]}")
    if np.count_nonzero(v.sum(axis=0)) < 2:
        raise DegenerateEvidenceError(f"evidence '{name}' has a single class")
    if cfg.budget == 0:
        raise ScreeningInconclusiveError(f"screening budget for '{name}' is zero")

    # Standardised inputs keep Adam's fixed-size steps from fitting noise.
    std = x.std(axis=0)
    x = (x - x.mean(axis=0)) / np.where(std > 0, std, 1.0)

    rng = np.random.default_rng(cfg.seed)
    encoder = glorot_layer(x.shape[1], cfg.latent_dim, Activation.LINEAR, rng)
    head = glorot_layer(cfg.latent_dim, v.shape[1], Activation.SOFTMAX, rng, head=True)
    params = {**encoder.params("enc"), **head.params("head")}
    state = AdamState(lr=cfg.lr)
    for it in range(cfg.budget):
        z = dense_forward(encoder, x)
        q = dense_forward(head, z)
        loss, grad_logits = softmax_cross_entropy(v, q)
        if not np.isfinite(loss):
            raise DivergenceError(f"screening of '{name}' diverged", it)
        head_grads, grad_z = linear_backward(head, z, grad_logits)
        enc_grads, _ = linear_backward(encoder, x, grad_z)
        adam_step(state, params, {**enc_grads.named("enc"), **head_grads.named("head")})

    q = dense_forward(head, dense_forward(encoder, x))
    entropy = -np.sum(q * np.log(q + LOG_CLIP), axis=1)
    mean_entropy = float(entropy.mean())
    ratio = mean_entropy / float(np.log(v.shape[1]))
    verdict = ScreeningVerdict(
        source=name,
        mean_entropy=mean_entropy,
        entropy_ratio=ratio,
        threshold=cfg.threshold,
        accepted=ratio < cfg.threshold,
    )
    logger.info("screening %s: entropy ratio %.3f -> %s", name, ratio,
                "accepted" if verdict.accepted else "rejected")
    return verdict


# ============================================================================
# Checkpoints
# ============================================================================

def save_model(model: AutoencoderModel, path: Union[str, Path],
               config: Optional[dict] = None, seed: Optional[int] = None) -> Path:
    """Write a versioned .npz checkpoint; arrays round-trip bit-exactly."""
    path = Path(path)
    arrays = dict(model.ae_params())
    arrays.update(model.head_params())
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "encoder_activations": [l.activation.value for l in model.encoder_layers],
        "decoder_activations": [l.activation.value for l in model.decoder_layers],
        "heads": [h.name for h in model.heads],
        "corruption_rate": model.corruption_rate,
        "initialized": model.initialized,
        "config": config or {},
        "seed": seed,
    }
    with open(path, "wb") as f:
        np.savez(f, __meta__=np.array(json.dumps(meta, sort_keys=True)),
                 **{k: np.ascontiguousarray(v) for k, v in arrays.items()})
    return path


def load_model(path: Union[str, Path]) -> Tuple[AutoencoderModel, dict]:
    """Inverse of ``save_model``. Returns (model, metadata)."""
    try:
        archive = np.load(Path(path), allow_pickle=False)
    except (OSError, ValueError) as e:
        raise DataLoadError(f"{path}: unreadable checkpoint ({e})") from e
    if not hasattr(archive, "files"):
        raise DataLoadError(f"{path}: not a model checkpoint")
    with archive:
        if "__meta__" not in archive:
            raise DataLoadError(f"{path}: not a model checkpoint")
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise DataLoadError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")

        def layer(prefix: str, activation: str, head: bool = False) -> DenseLayer:
            return DenseLayer(archive[f"{prefix}.weights"].copy(), archive[f"{prefix}.bias"].copy(),
                              Activation(activation), head=head)

        encoder = [layer(f"enc{i}", a) for i, a in enumerate(meta["encoder_activations"])]
        decoder = [layer(f"dec{i}", a) for i, a in enumerate(meta["decoder_activations"])]
        heads = [EvidenceHead(n, layer(f"head.{n}", Activation.SOFTMAX.value, head=True)) for n in meta["heads"]]
    model = AutoencoderModel(encoder, decoder, corruption_rate=meta["corruption_rate"],
                             heads=heads, initialized=meta["initialized"])
    return model, meta
