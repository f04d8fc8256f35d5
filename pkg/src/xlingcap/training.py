"""Training: joint cross-lingual phase, adversarial cross-modal phase,
checkpoint glue and end-to-end caption inference.

Phase 1 trains both encode/decode branches with teacher forcing, warming up
on cross-entropy alone, then adding the exponentiated-KL feature-alignment
term.  Phase 2 freezes everything from phase 1, precomputes node-level
encoded features for both modalities, and trains six cross-modal mappers
plus per-type discriminators with 1:1 alternating updates and a cycle
penalty.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .checkpoint import checksum_tensors, load_checkpoint, save_checkpoint
from .config import ModelConfig, Phase1Config, Phase2Config
from .embedspace import CrossLingualSpace, EmbeddingTable
from .errors import ContractError, TrainingDiverged
from .model import BranchFeatures, Phase1Model, collect_node_features
from .numerics import AdamState, Tensor, adam_step
from .params import Affine, Mlp, ParamGroup
from .scenegraph import SceneGraph, merge_graphs
from .synthworld import (ImageBank, ParallelCorpus, World, apply_distortion,
                         materialize_distortion)

FEATURE_KINDS = ("o", "a", "r")


# -- losses --------------------------------------------------------------------

@dataclass
class BatchLosses:
    loss: Tensor
    xe: Tensor
    kl: Tensor | None
    n_tokens: int


def xe_loss(model: Phase1Model, items: list) -> tuple[Tensor, int]:
    """Summed teacher-forced NLL of both language branches for a batch."""
    graphs = [it.graph for it in items]
    enc_x = model.branch_encoded(graphs, "x")
    enc_y = model.branch_encoded(graphs, "y")
    xe_x, n_x = model.teacher_forced_nll(enc_x, [it.source for it in items], "x")
    xe_y, n_y = model.teacher_forced_nll(enc_y, [it.target for it in items], "y")
    return xe_x + xe_y, n_x + n_y


def kl_loss(pooled_x: dict, pooled_y: dict, proj: Affine) -> Tensor:
    """Sum over feature types of exp(KL(source dist || target dist)).

    Inputs are per-type (pooled features, present-graph indices) pairs; a
    type absent from the whole batch contributes exp(0) = 1 exactly.
    """
    total: Tensor | None = None
    for kind in FEATURE_KINDS:
        zx, zy = pooled_x[kind], pooled_y[kind]
        if zx is None or zy is None:
            if (zx is None) != (zy is None):
                raise ContractError(
                    f"kl_loss: type {kind!r} present on one side only")
            term = Tensor(1.0)
        else:
            feats_x, present_x = zx
            feats_y, present_y = zy
            if not np.array_equal(present_x, present_y):
                raise ContractError("kl_loss: mismatched sentence coverage")
            px = nm.reduce_mean(nm.softmax(proj(feats_x)), axis=0)
            py = nm.reduce_mean(nm.softmax(proj(feats_y)), axis=0)
            kl = nm.reduce_sum(px * (nm.log(px) - nm.log(py)))
            term = nm.exp(kl)
        total = term if total is None else total + term
    return total


def batch_losses(model: Phase1Model, items: list, use_kl: bool) -> BatchLosses:
    graphs = [it.graph for it in items]
    enc_x = model.branch_encoded(graphs, "x")
    enc_y = model.branch_encoded(graphs, "y")
    xe_x, n_x = model.teacher_forced_nll(enc_x, [it.source for it in items], "x")
    xe_y, n_y = model.teacher_forced_nll(enc_y, [it.target for it in items], "y")
    xe = xe_x + xe_y
    # optimize batch-mean XE so the KL term keeps a meaningful relative
    # weight regardless of batch size (Adam is scale-free, the sum is not)
    loss = xe * (1.0 / len(items))
    kl = None
    if use_kl:
        # source branch acts as the (detached) teacher: alignment pressure
        # moves the mapped-branch features, not the reference distribution
        pooled_x = {k: ((v[0].detach(), v[1]) if v else None)
                    for k, v in model.pooled_features(enc_x).items()}
        kl = kl_loss(pooled_x, model.pooled_features(enc_y), model.kl_proj)
        loss = loss + kl
    return BatchLosses(loss=loss, xe=xe, kl=kl, n_tokens=n_x + n_y)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), safe against overflow."""
    mag = nm.relu(x) + nm.relu(-x)
    return nm.relu(x) + nm.log(nm.exp(-mag) + 1.0)


class Discriminator(ParamGroup):
    """linear -> leaky_relu(0.2) -> linear -> sigmoid, exposed as logits."""

    def __init__(self, rng, d: int, hidden: int):
        self.lin1 = Affine(rng, d, hidden)
        self.lin2 = Affine(rng, hidden, 1)

    def logits(self, x: Tensor) -> Tensor:
        return self.lin2(nm.leaky_relu(self.lin1(x), 0.2))

    def prob(self, x: Tensor) -> Tensor:
        return nm.sigmoid(self.logits(x))


def _init_near_identity(mlp: Mlp, d: int) -> None:
    """Start a relu MLP as (approximately) the identity map.

    With hidden width >= 2d the +/- split makes it exact for any input;
    narrower mappers get a positive-passthrough diagonal, exact on the
    nonnegative orthant the encoder features live in.  Mappers that start
    at identity leave the discriminator a clean real-vs-distorted signal
    instead of random-projection noise.
    """
    h = mlp.layers[0].w.shape[1]
    for layer in mlp.layers:
        layer.w.data[:] = 0.0
        layer.b.data[:] = 0.0
    if h >= 2 * d:
        mlp.layers[0].w.data[:d, :d] = np.eye(d)
        mlp.layers[0].w.data[:d, d:2 * d] = -np.eye(d)
        mlp.layers[1].w.data[:2 * d, :2 * d] = np.eye(2 * d)
        mlp.layers[2].w.data[:d, :d] = np.eye(d)
        mlp.layers[2].w.data[d:2 * d, :d] = -np.eye(d)
    else:
        k = min(h, d)
        mlp.layers[0].w.data[:k, :k] = np.eye(k)
        mlp.layers[1].w.data[:k, :k] = np.eye(k)
        mlp.layers[2].w.data[:k, :k] = np.eye(k)


class CrossModalParams(ParamGroup):
    """Six mapping functions g^p plus per-type discriminators on each side."""

    def __init__(self, rng, d: int, mapper_hidden: int, disc_hidden: int):
        self.mappers = {}
        self.discs = {}
        for kind in FEATURE_KINDS:
            for direction in ("i2y", "y2i"):
                mapper = Mlp(rng, [d, mapper_hidden, mapper_hidden, d])
                _init_near_identity(mapper, d)
                self.mappers[f"{kind}_{direction}"] = mapper
            for side in ("y", "i"):
                self.discs[f"{kind}_{side}"] = Discriminator(rng, d, disc_hidden)

    def map_i2y(self, kind: str, x: Tensor) -> Tensor:
        return self.mappers[f"{kind}_i2y"](x)

    def map_y2i(self, kind: str, x: Tensor) -> Tensor:
        return self.mappers[f"{kind}_y2i"](x)

    def mapper_tensors(self) -> dict[str, Tensor]:
        return {name: t for name, t in self.named_tensors()
                if name.startswith("mappers.")}

    def disc_tensors(self) -> dict[str, Tensor]:
        return {name: t for name, t in self.named_tensors()
                if name.startswith("discs.")}


def gan_losses(z_i: Tensor, z_y: Tensor, direction: str,
               params: CrossModalParams, kind: str = "o",
               variant: str = "non_saturating",
               detach_fake: bool = False) -> tuple[Tensor, Tensor]:
    """Generator loss (minimized) and the discriminator objective value
    (maximized by the discriminator) for one mapping direction."""
    if direction == "i2y":
        real, fake_src = z_y, z_i
        mapper = params.mappers[f"{kind}_i2y"]
        disc = params.discs[f"{kind}_y"]
    elif direction == "y2i":
        real, fake_src = z_i, z_y
        mapper = params.mappers[f"{kind}_y2i"]
        disc = params.discs[f"{kind}_i"]
    else:
        raise ContractError(f"unknown direction {direction!r}")
    fake = mapper(fake_src)
    if detach_fake:
        fake = fake.detach()
    logit_real = disc.logits(real)
    logit_fake = disc.logits(fake)
    # E[log D(real)] + E[log(1 - D(fake))], written with stable log-sigmoids
    disc_value = (nm.reduce_mean(-softplus(-logit_real))
                  + nm.reduce_mean(-softplus(logit_fake)))
    if variant == "non_saturating":
        gen = nm.reduce_mean(softplus(-logit_fake))
    elif variant == "minimax":
        gen = nm.reduce_mean(-softplus(logit_fake))
    else:
        raise ContractError(f"unknown gan variant {variant!r}")
    return gen, disc_value


def cycle_loss(z_i: Tensor, z_y: Tensor, params: CrossModalParams,
               kind: str = "o") -> Tensor:
    """Mean L1 reconstruction error through both round trips."""
    fwd = params.map_y2i(kind, params.map_i2y(kind, z_i))
    bwd = params.map_i2y(kind, params.map_y2i(kind, z_y))
    term_i = nm.l1_distance(fwd, z_i) * (1.0 / max(1, z_i.shape[0]))
    term_y = nm.l1_distance(bwd, z_y) * (1.0 / max(1, z_y.shape[0]))
    return term_i + term_y


# -- phase 1 -------------------------------------------------------------------

@dataclass
class Phase1Result:
    model: Phase1Model
    history: list[dict] = field(default_factory=list)
    final_kl: float = float("nan")
    final_xe_per_token: float = float("nan")


def _augmented_items(corpus: ParallelCorpus) -> list:
    out = []
    for item in corpus.items:
        merged = merge_graphs([item.graph] + [g for _, g in item.paraphrases])
        out.append(dataclasses.replace(item, graph=merged))
    return out


def evaluate_kl(model: Phase1Model, items: list, batch: int = 50) -> float:
    """Mean KL loss value over the corpus at the current parameters."""
    values = []
    with nm.no_grad():
        for start in range(0, len(items), batch):
            chunk = items[start:start + batch]
            graphs = [it.graph for it in chunk]
            enc_x = model.branch_encoded(graphs, "x")
            enc_y = model.branch_encoded(graphs, "y")
            value = kl_loss(model.pooled_features(enc_x),
                            model.pooled_features(enc_y), model.kl_proj)
            values.append(value.item())
    return float(np.mean(values))


def train_phase1(world: World, corpus: ParallelCorpus, model_cfg: ModelConfig,
                 cfg: Phase1Config, seed: int, out_dir=None,
                 progress=None) -> Phase1Result:
    """Cross-entropy warm phase followed by the joint XE+KL phase."""
    cfg.validate()
    model_cfg.validate()
    model = Phase1Model(world.space, world.source_vocab, world.target_vocab,
                        model_cfg, cfg.d_c, seed)
    items = _augmented_items(corpus) if cfg.augment_merge else list(corpus.items)
    params = model.as_dict()
    opt = AdamState(params, lr=cfg.lr)
    order_rng = np.random.default_rng([seed, 5000])
    result = Phase1Result(model=model)

    total_epochs = cfg.epochs_xe + cfg.epochs_joint
    for epoch in range(total_epochs):
        joint = cfg.use_kl and epoch >= cfg.epochs_xe
        perm = order_rng.permutation(len(items))
        epoch_xe = 0.0
        epoch_tokens = 0
        epoch_kl = []
        for start in range(0, len(items), cfg.batch):
            batch = [items[i] for i in perm[start:start + cfg.batch]]
            model.zero_grad()
            nm.reset_tape()
            out = batch_losses(model, batch, use_kl=joint)
            loss_value = out.loss.item()
            if not np.isfinite(loss_value):
                raise TrainingDiverged(
                    f"phase1: non-finite loss at epoch {epoch}, "
                    f"batch starting {start} (xe={out.xe.item()!r})")
            nm.backward(out.loss)
            grads = {k: t.grad for k, t in params.items()}
            adam_step(params, grads, opt)
            epoch_xe += out.xe.item()
            epoch_tokens += out.n_tokens
            if out.kl is not None:
                epoch_kl.append(out.kl.item())
        record = {
            "epoch": epoch,
            "joint": joint,
            "xe_per_token": epoch_xe / max(1, epoch_tokens),
            "kl": float(np.mean(epoch_kl)) if epoch_kl else None,
        }
        result.history.append(record)
        if progress is not None:
            progress(record)
        if out_dir is not None:
            save_phase1_checkpoint(out_dir, model, world, cfg, seed)
    result.final_xe_per_token = result.history[-1]["xe_per_token"] \
        if result.history else float("nan")
    result.final_kl = evaluate_kl(model, items, cfg.batch)
    return result


# -- checkpoint glue -----------------------------------------------------------

def _table_blobs(prefix: str, table: EmbeddingTable) -> tuple[dict, list[str]]:
    return {f"{prefix}.matrix": table.matrix}, table.tokens


def save_phase1_checkpoint(directory, model: Phase1Model, world: World,
                           cfg: Phase1Config, seed: int,
                           extra: dict | None = None) -> None:
    tensors = dict(model.named_tensors())
    src_blob, src_tokens = _table_blobs("frozen.source", model.space.source)
    tgt_blob, tgt_tokens = _table_blobs("frozen.target", model.space.target)
    tensors.update(src_blob)
    tensors.update(tgt_blob)
    meta = {
        "kind": "phase1",
        "seed": seed,
        "model": dataclasses.asdict(model.cfg),
        "phase1": dataclasses.asdict(cfg),
        "source_vocab": sorted(world.source_vocab),
        "target_vocab": sorted(world.target_vocab),
        "frozen_tokens": {"source": src_tokens, "target": tgt_tokens},
    }
    if extra:
        meta.update(extra)
    save_checkpoint(directory, tensors, meta)


def load_phase1_model(directory) -> tuple[Phase1Model, dict]:
    blobs, manifest = load_checkpoint(directory)
    if manifest.get("kind") not in ("phase1", "phase2"):
        raise ContractError(f"{directory}: not a phase checkpoint")
    model_cfg = ModelConfig(**manifest["model"])
    src_tokens = manifest["frozen_tokens"]["source"]
    tgt_tokens = manifest["frozen_tokens"]["target"]
    source = EmbeddingTable(dict(zip(src_tokens, blobs["frozen.source.matrix"])))
    target = EmbeddingTable(dict(zip(tgt_tokens, blobs["frozen.target.matrix"])))
    space = CrossLingualSpace(source, target)
    model = Phase1Model(space, manifest["source_vocab"],
                        manifest["target_vocab"], model_cfg,
                        manifest["phase1"]["d_c"], manifest["seed"])
    own = model.as_dict()
    for name, tensor in own.items():
        if name not in blobs:
            raise ContractError(f"{directory}: checkpoint lacks tensor {name!r}")
        if tuple(blobs[name].shape) != tensor.shape:
            raise ContractError(f"{directory}: shape mismatch for {name!r}")
        tensor.data = blobs[name].astype(tensor.data.dtype)
    return model, manifest


# -- phase 2 -------------------------------------------------------------------

@dataclass
class Phase2Result:
    cmm: CrossModalParams
    history: list[dict] = field(default_factory=list)
    final_cycle_per_dim: float = float("nan")
    frozen_checksum: str = ""


def _phase1_checksum(model: Phase1Model) -> str:
    return checksum_tensors(dict(model.named_tensors()))


def image_features(model: Phase1Model, world: World, graphs: list[SceneGraph]
                   ) -> BranchFeatures:
    """Encoded image-side node features with the hidden modality warp applied."""
    feats = collect_node_features(model, graphs)
    a_mat, b_vec = materialize_distortion(world.config.distortion,
                                          model.cfg.d_emb, world.seed)
    return BranchFeatures(o=apply_distortion(a_mat, b_vec, feats.o),
                          r=apply_distortion(a_mat, b_vec, feats.r),
                          a=apply_distortion(a_mat, b_vec, feats.a))


def train_phase2(world: World, bank: ImageBank, corpus: ParallelCorpus,
                 model: Phase1Model, cfg: Phase2Config, seed: int,
                 progress=None) -> Phase2Result:
    """Adversarial cross-modal feature mapping over frozen phase-1 features."""
    cfg.validate()
    model.freeze()
    checksum_before = _phase1_checksum(model)

    feats_y = collect_node_features(model, [it.graph for it in corpus.items])
    feats_i = image_features(model, world, bank.graphs)
    d = model.cfg.d_emb

    rng = np.random.default_rng([seed, 6000])
    cmm = CrossModalParams(rng, d, cfg.mapper_hidden, cfg.disc_hidden)
    gen_params = cmm.mapper_tensors()
    disc_params = cmm.disc_tensors()
    opt_g = AdamState(gen_params, lr=cfg.lr)
    opt_d = AdamState(disc_params, lr=cfg.lr)

    result = Phase2Result(cmm=cmm)
    for epoch in range(cfg.epochs):
        cycle_values = {k: [] for k in FEATURE_KINDS}
        for kind in FEATURE_KINDS:
            zi_all, zy_all = feats_i.get(kind), feats_y.get(kind)
            if zi_all.shape[0] == 0 or zy_all.shape[0] == 0:
                continue
            n_steps = max(1, min(len(zi_all), len(zy_all)) // cfg.batch)
            for _ in range(n_steps):
                zi = Tensor(zi_all[rng.integers(0, len(zi_all), cfg.batch)])
                zy = Tensor(zy_all[rng.integers(0, len(zy_all), cfg.batch)])

                # discriminator ascent on the Eq-style value (fake detached)
                cmm.zero_grad()
                nm.reset_tape()
                _, dv_a = gan_losses(zi, zy, "i2y", cmm, kind,
                                     cfg.gan_variant, detach_fake=True)
                _, dv_b = gan_losses(zi, zy, "y2i", cmm, kind,
                                     cfg.gan_variant, detach_fake=True)
                d_loss = -(dv_a + dv_b)
                nm.backward(d_loss)
                adam_step(disc_params,
                          {k: t.grad for k, t in disc_params.items()}, opt_d)

                # generator step with cycle regularization
                cmm.zero_grad()
                nm.reset_tape()
                gen_a, _ = gan_losses(zi, zy, "i2y", cmm, kind, cfg.gan_variant)
                gen_b, _ = gan_losses(zi, zy, "y2i", cmm, kind, cfg.gan_variant)
                cyc = cycle_loss(zi, zy, cmm, kind)
                g_loss = gen_a + gen_b + cyc * cfg.lam
                if not np.isfinite(g_loss.item()):
                    raise TrainingDiverged(
                        f"phase2: non-finite loss at epoch {epoch} kind {kind}")
                nm.backward(g_loss)
                adam_step(gen_params,
                          {k: t.grad for k, t in gen_params.items()}, opt_g)
                cycle_values[kind].append(cyc.item())
        record = {"epoch": epoch,
                  "cycle": {k: (float(np.mean(v)) if v else None)
                            for k, v in cycle_values.items()}}
        result.history.append(record)
        if progress is not None:
            progress(record)

    checksum_after = _phase1_checksum(model)
    if checksum_after != checksum_before:
        raise ContractError("phase2 modified frozen phase-1 parameters")
    result.frozen_checksum = checksum_after
    result.final_cycle_per_dim = evaluate_cycle_per_dim(cmm, feats_i, feats_y)
    return result


def evaluate_cycle_per_dim(cmm: CrossModalParams, feats_i: BranchFeatures,
                           feats_y: BranchFeatures) -> float:
    """Full-dataset cycle loss normalized per feature dimension."""
    values = []
    with nm.no_grad():
        for kind in FEATURE_KINDS:
            zi, zy = feats_i.get(kind), feats_y.get(kind)
            if zi.shape[0] == 0 or zy.shape[0] == 0:
                continue
            value = cycle_loss(Tensor(zi), Tensor(zy), cmm, kind).item()
            values.append(value / (2 * zi.shape[1]))
    return float(np.mean(values)) if values else float("nan")


def save_phase2_checkpoint(directory, model: Phase1Model, cmm: CrossModalParams,
                           world: World, p1_cfg: Phase1Config,
                           p2_cfg: Phase2Config, seed: int,
                           frozen_checksum: str) -> None:
    tensors = dict(model.named_tensors())
    tensors.update({f"cmm.{n}": t for n, t in cmm.named_tensors()})
    src_blob, src_tokens = _table_blobs("frozen.source", model.space.source)
    tgt_blob, tgt_tokens = _table_blobs("frozen.target", model.space.target)
    tensors.update(src_blob)
    tensors.update(tgt_blob)
    meta = {
        "kind": "phase2",
        "seed": seed,
        "model": dataclasses.asdict(model.cfg),
        "phase1": dataclasses.asdict(p1_cfg),
        "phase2": dataclasses.asdict(p2_cfg),
        "source_vocab": sorted(model.vocab_x[2:]),
        "target_vocab": sorted(model.vocab_y[2:]),
        "frozen_tokens": {"source": src_tokens, "target": tgt_tokens},
        "frozen_checksum": frozen_checksum,
    }
    save_checkpoint(directory, tensors, meta)


def load_phase2(directory) -> tuple[Phase1Model, CrossModalParams, dict]:
    model, manifest = load_phase1_model(directory)
    if manifest.get("kind") != "phase2":
        raise ContractError(f"{directory}: not a phase-2 checkpoint")
    blobs, _ = load_checkpoint(directory)
    p2 = Phase2Config(**manifest["phase2"])
    cmm = CrossModalParams(np.random.default_rng(0), model.cfg.d_emb,
                           p2.mapper_hidden, p2.disc_hidden)
    for name, tensor in cmm.named_tensors():
        key = f"cmm.{name}"
        if key not in blobs:
            raise ContractError(f"{directory}: checkpoint lacks tensor {key!r}")
        tensor.data = blobs[key].astype(tensor.data.dtype)
    return model, cmm, manifest


def infer_caption(model: Phase1Model, graph: SceneGraph,
                  cmm: CrossModalParams | None = None,
                  distortion: tuple[np.ndarray, np.ndarray] | None = None,
                  beam: int = 5, use_cmm: bool = True) -> list[str]:
    """Caption a graph through the target-language pipeline.

    Image-modality graphs get the hidden distortion applied to their encoded
    features; with ``use_cmm`` the cross-modal mappers then pull those
    features back to the sentence manifold before decoding.
    """
    mappers = cmm if (use_cmm and cmm is not None) else None
    return model.caption(graph, branch="y", beam=beam, mappers=mappers,
                         distortion=distortion)
