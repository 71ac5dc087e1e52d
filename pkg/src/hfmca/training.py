"""Training orchestration: batches, costs, optimization, checkpoints.

One trainer owns one network. Every step draws its batch, augmentation and
noise randomness from named sub-streams keyed by (config seed, stream id,
step index), so a resumed run continues bit-exactly and two runs with the
same config are identical.

Per step, the enabled cost sites are built from the train-mode forward:
one internal site per neighboring scale pair and an external site coupling
the L view features to the head output. Each site's statistics pass
through its adaptive filter; the ridge inverses of the filtered blocks
become the frozen coefficients of the surrogate whose gradient is applied.
The value logged is always the true log-determinant cost.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import linalg
from .costs import (
    AcfFilterBank,
    CorrStats,
    filter_update,
    logdet_cost,
    stats_external,
    stats_internal,
    surrogate_cost,
)
from .data import AugmentProtocol, LabeledDataset, sample_same_class, sample_views
from .network import Network, NetworkSpec, build_network, geometry

__all__ = [
    "TrainerError",
    "TrainConfig",
    "TrainLog",
    "SgdMomentum",
    "Adam",
    "make_optimizer",
    "Trainer",
    "checkpoint_save",
    "checkpoint_load",
    "load_network",
    "embed_images",
    "eval_pair_stats",
    "eval_external_stats",
]

STREAM_DATA, STREAM_INIT, STREAM_AUG, STREAM_NOISE, STREAM_EVAL = 0, 1, 2, 3, 4

_MODES = ("self_supervised", "supervised", "unsupervised")


class TrainerError(RuntimeError):
    pass


def substream(seed: int, stream: int, *key: int) -> np.random.Generator:
    """Named, stateless RNG derivation: a fixed function of its arguments."""
    seq = np.random.SeedSequence(entropy=seed, spawn_key=(stream, *key))
    return np.random.default_rng(seq)


def derive_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(stream,)).generate_state(1)[0])


@dataclass
class TrainConfig:
    mode: str = "self_supervised"
    use_internal: bool = True
    use_external: bool = True
    views: int = 4
    ridge: float = 0.1
    beta: float = 0.0
    internal_weight: float = 1.0
    optimizer: str = "sgd"
    lr: float = 0.06
    momentum: float = 0.9
    adam_beta1: float = 0.5
    adam_beta2: float = 0.9
    batch_size: int = 32
    steps: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.mode not in _MODES:
            raise TrainerError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.mode == "unsupervised":
            # only internal costs exist without a view collection
            self.use_external = False
            self.use_internal = True
        if not (self.use_internal or self.use_external):
            raise TrainerError("at least one of the cost families must be enabled")
        if self.views < 1:
            raise TrainerError("views must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise TrainerError(f"unknown optimizer {self.optimizer!r}")
        if self.ridge <= 0:
            raise TrainerError("ridge must be > 0 for training")
        if self.batch_size < 2:
            raise TrainerError("batch_size must be >= 2 (batch-norm statistics)")
        if self.steps < 0 or self.seed < 0:
            raise TrainerError("steps and seed must be non-negative")

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise TrainerError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainLog:
    """Per-step cost trace. ``external`` entries are None when that cost is
    off; ``internal`` holds one dict {pair -> cost} per step."""

    steps: list[int] = field(default_factory=list)
    external: list[float | None] = field(default_factory=list)
    internal: list[dict[int, float]] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    min_eig_lower: list[float | None] = field(default_factory=list)

    def append(self, step, external, internal, total, grad_norm, min_eig_lower):
        if self.steps and step <= self.steps[-1]:
            raise TrainerError("step indices must be strictly increasing")
        for v in [total, grad_norm] + list(internal.values()) + (
            [external] if external is not None else []
        ):
            if not np.isfinite(v):
                raise TrainerError(f"non-finite cost at step {step}")
        self.steps.append(step)
        self.external.append(external)
        self.internal.append(dict(internal))
        self.total.append(total)
        self.grad_norm.append(grad_norm)
        self.min_eig_lower.append(min_eig_lower)


class SgdMomentum:
    def __init__(self, params: list[ad.Tensor], lr: float, momentum: float):
        self.params = params
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"opt.velocity.{p.name}", v) for p, v in zip(self.params, self.velocity)]
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for i, p in enumerate(self.params):
            self.velocity[i] = np.array(arrays[f"opt.velocity.{p.name}"], dtype=np.float64)


class Adam:
    def __init__(self, params: list[ad.Tensor], lr: float, beta1: float, beta2: float,
                 eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [("opt.t", np.asarray(float(self.t)))]
        for p, m, v in zip(self.params, self.m, self.v):
            out.append((f"opt.m.{p.name}", m))
            out.append((f"opt.v.{p.name}", v))
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["opt.t"])
        for i, p in enumerate(self.params):
            self.m[i] = np.array(arrays[f"opt.m.{p.name}"], dtype=np.float64)
            self.v[i] = np.array(arrays[f"opt.v.{p.name}"], dtype=np.float64)


def make_optimizer(config: TrainConfig, params: list[ad.Tensor]):
    if config.optimizer == "sgd":
        return SgdMomentum(params, config.lr, config.momentum)
    return Adam(params, config.lr, config.adam_beta1, config.adam_beta2)


class Trainer:
    """Owns one network, one dataset and the per-site adaptive filters."""

    def __init__(
        self,
        network: Network,
        dataset: LabeledDataset,
        config: TrainConfig,
        protocol: AugmentProtocol | None = None,
    ):
        self.network = network
        self.dataset = dataset
        self.config = config
        if config.use_external and network.head is None:
            raise TrainerError("external cost requires a network head")
        if config.use_internal and network.scales < 2:
            raise TrainerError("internal costs need at least two scales")
        if protocol is None:
            protocol = AugmentProtocol(seed=derive_seed(config.seed, STREAM_AUG))
        self.protocol = protocol
        self.geom = geometry(network.spec, dataset.images.shape[2:])
        self.bank = AcfFilterBank(config.beta)
        self.optimizer = make_optimizer(config, network.params())
        self.step_index = 0
        self.log = TrainLog()

    # ------------------------------------------------------------------
    def _batch_indices(self, step: int) -> np.ndarray:
        rng = substream(self.config.seed, STREAM_DATA, step)
        return rng.integers(0, len(self.dataset), self.config.batch_size)

    def _noise_rng(self, step: int) -> np.random.Generator:
        return substream(self.config.seed, STREAM_NOISE, step)

    def _view_groups(self, step: int, indices: np.ndarray) -> list[np.ndarray]:
        """Per-source view stacks (L, C, H, W), built per mode."""
        cfg = self.config
        groups = []
        for i in indices:
            if cfg.mode == "self_supervised":
                g = sample_views(
                    self.dataset.images[i],
                    self.protocol,
                    cfg.views,
                    source_index=int(i),
                    step=step,
                )
            else:  # supervised
                rng = substream(cfg.seed, STREAM_AUG, step, int(i))
                g = sample_same_class(self.dataset, int(i), cfg.views, rng)
            groups.append(g.views)
        return groups

    def _site_cost(self, site: str, stats: CorrStats):
        """Filter, precondition, and return (surrogate tensor, logged cost)."""
        ridge = self.config.ridge
        est_phi, est_psi, est_joint = filter_update(self.bank, site, stats)
        precond = (
            linalg.ridge_inverse(est_phi, ridge),
            linalg.ridge_inverse(est_psi, ridge),
            linalg.ridge_inverse(est_joint, ridge),
        )
        return surrogate_cost(stats, precond), logdet_cost(stats, ridge)

    def run_step(self) -> dict:
        """One optimization step; returns the logged entry as a dict."""
        cfg = self.config
        step = self.step_index
        indices = self._batch_indices(step)
        noise_rng = self._noise_rng(step)

        internal_logged: dict[int, float] = {}
        surrogates: list[ad.Tensor] = []
        external_logged = None
        min_eig_lower = None

        if cfg.mode == "unsupervised":
            batch = ad.constant(self.dataset.images[indices])
            feats, lowers = self.network.forward_all(batch, train=True, noise_rng=noise_rng)
        else:
            groups = self._view_groups(step, indices)
            L = cfg.views
            n = len(groups)
            # view-major stacking: all first views, then all second views, ...
            stacked = np.concatenate(
                [np.stack([g[l] for g in groups]) for l in range(L)], axis=0
            )
            feats, lowers = self.network.forward_all(
                ad.constant(stacked), train=True, noise_rng=noise_rng
            )

        if cfg.use_internal:
            for s in range(1, self.network.scales):
                st = stats_internal(lowers[s], feats[s], geom=self.geom, s=s)
                sur, logged = self._site_cost(f"internal_{s}", st)
                surrogates.append(ad.scale(sur, cfg.internal_weight))
                internal_logged[s] = logged

        if cfg.use_external:
            top = feats[-1]
            if top.shape[2:] != (1, 1):
                raise TrainerError("external cost needs 1x1 top-scale features")
            view_tensors = _split_rows(top, L, n)
            group_feat = self.network.forward_head(view_tensors, train=True, noise_rng=noise_rng)
            view_rows = [ad.positions_by_channels(v) for v in view_tensors]
            group_rows = ad.positions_by_channels(group_feat)
            st_ext = stats_external(view_rows, group_rows)
            sur, logged = self._site_cost("external", st_ext)
            surrogates.append(sur)
            external_logged = logged
            min_eig_lower = float(np.linalg.eigvalsh(st_ext.arrays()[0]).min())

        total_surrogate = surrogates[0]
        for sur in surrogates[1:]:
            total_surrogate = ad.add(total_surrogate, sur)

        for p in self.network.params():
            p.zero_grad()
        total_surrogate.backward()
        grad_norm = float(
            np.sqrt(
                sum(
                    float((p.grad**2).sum())
                    for p in self.network.params()
                    if p.grad is not None
                )
            )
        )
        self.optimizer.step()

        total_logged = cfg.internal_weight * sum(internal_logged.values())
        if external_logged is not None:
            total_logged += external_logged
        self.log.append(
            step, external_logged, internal_logged, total_logged, grad_norm, min_eig_lower
        )
        self.step_index += 1
        return {
            "step": step,
            "external": external_logged,
            "internal": internal_logged,
            "total": total_logged,
            "grad_norm": grad_norm,
            "min_eig_lower": min_eig_lower,
        }

    def run(self, steps: int | None = None) -> TrainLog:
        n = self.config.steps if steps is None else steps
        for _ in range(n):
            self.run_step()
        return self.log


def _split_rows(top: ad.Tensor, views: int, n: int) -> list[ad.Tensor]:
    """Undo view-major stacking of the batch axis: L slices of n rows."""
    return [ad.take_rows(top, l * n, (l + 1) * n) for l in range(views)]


# ---------------------------------------------------------------------------
# evaluation helpers


def embed_images(
    network: Network, images: np.ndarray, seed: int = 0, batch_size: int = 256
) -> np.ndarray:
    """Eval-mode top-scale feature vectors, (N, K)."""
    rows = []
    with ad.no_grad():
        for c, start in enumerate(range(0, images.shape[0], batch_size)):
            chunk = images[start : start + batch_size]
            rng = substream(seed, STREAM_EVAL, c)
            feats, _ = network.forward_all(ad.constant(chunk), train=False, noise_rng=rng)
            top = feats[-1]
            rows.append(top.data.reshape(top.shape[0], -1))
    return np.concatenate(rows, axis=0)


def eval_pair_stats(
    network: Network, images: np.ndarray, seed: int = 0
) -> dict[int, CorrStats]:
    """Eval-mode internal-pair statistics over one batch of images."""
    geom = geometry(network.spec, images.shape[2:])
    with ad.no_grad():
        rng = substream(seed, STREAM_EVAL, 0)
        feats, lowers = network.forward_all(ad.constant(images), train=False, noise_rng=rng)
        return {
            s: stats_internal(lowers[s], feats[s], geom=geom, s=s)
            for s in range(1, network.scales)
        }


def eval_external_stats(
    network: Network,
    images: np.ndarray,
    protocol: AugmentProtocol,
    views: int,
    seed: int = 0,
) -> CorrStats:
    """Eval-mode external statistics over one batch of view groups."""
    if network.head is None:
        raise TrainerError("network has no head")
    groups = [
        sample_views(images[i], protocol, views, source_index=i, step=0).views
        for i in range(images.shape[0])
    ]
    stacked = np.concatenate([np.stack([g[l] for g in groups]) for l in range(views)], axis=0)
    n = images.shape[0]
    with ad.no_grad():
        rng = substream(seed, STREAM_EVAL, 1)
        feats, _ = network.forward_all(ad.constant(stacked), train=False, noise_rng=rng)
        view_tensors = _split_rows(feats[-1], views, n)
        group_feat = network.forward_head(view_tensors, train=False, noise_rng=rng)
        return stats_external(
            [ad.positions_by_channels(v) for v in view_tensors],
            ad.positions_by_channels(group_feat),
        )


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"HFMC"
_VERSION = 1


class CheckpointError(ValueError):
    pass


def _named_tensors(trainer_or_network) -> list[tuple[str, np.ndarray]]:
    if isinstance(trainer_or_network, Trainer):
        net = trainer_or_network.network
        entries = [(p.name, p.data) for p in net.params()]
        entries += net.state()
        entries += trainer_or_network.bank.named_arrays()
        entries += trainer_or_network.optimizer.named_arrays()
        return entries
    net = trainer_or_network
    return [(p.name, p.data) for p in net.params()] + net.state()


def checkpoint_save(target: Trainer | Network, path) -> None:
    """Binary checkpoint: magic, version, JSON header (network spec, step,
    filter smoothing), then named little-endian float64 tensors."""
    if isinstance(target, Trainer):
        header = {
            "format_version": _VERSION,
            "network": target.network.spec.to_json(),
            "step": target.step_index,
            "beta": target.bank.beta,
            "optimizer": target.config.optimizer,
        }
    else:
        header = {
            "format_version": _VERSION,
            "network": target.spec.to_json(),
            "step": 0,
            "beta": 0.0,
            "optimizer": None,
        }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    entries = _named_tensors(target)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            arr = np.asarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<Q", d))
            fh.write(arr.tobytes())


def checkpoint_load(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into (header, name -> array)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    try:
        header = json.loads(raw[off : off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from exc
    off += hlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}Q", raw, off) if rank else ()
        off += 8 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        arrays[name] = arr.astype(np.float64)
    if off != len(raw):
        raise CheckpointError("trailing bytes after the last tensor")
    return header, arrays


def _restore_network(network: Network, arrays: dict[str, np.ndarray]) -> None:
    for p in network.params():
        if p.name not in arrays:
            raise CheckpointError(f"missing parameter {p.name!r}")
        if arrays[p.name].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {p.name!r}")
        p.data = np.array(arrays[p.name], dtype=np.float64)
    for name, buf in network.state():
        if name not in arrays:
            raise CheckpointError(f"missing state {name!r}")
        buf[...] = arrays[name]


def load_network(path, network: Network | None = None) -> Network:
    """Rebuild (or fill) a network from a checkpoint. Passing a network with
    a different spec than the stored one is an error."""
    header, arrays = checkpoint_load(path)
    spec = NetworkSpec.from_json(header["network"])
    if network is None:
        network = build_network(spec, np.random.default_rng(0))
    elif network.spec.to_json() != spec.to_json():
        raise CheckpointError("checkpoint spec does not match the provided network")
    _restore_network(network, arrays)
    return network


def restore_trainer(path, trainer: Trainer) -> Trainer:
    """Resume: network params/state, filter bank, optimizer slots, step."""
    header, arrays = checkpoint_load(path)
    if trainer.network.spec.to_json() != header["network"]:
        raise CheckpointError("checkpoint spec does not match the trainer's network")
    _restore_network(trainer.network, arrays)
    bank_entries = {k: v for k, v in arrays.items() if k.startswith("bank.")}
    trainer.bank.load_arrays(bank_entries)
    opt_entries = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    if opt_entries:
        trainer.optimizer.load_arrays(opt_entries)
    trainer.step_index = int(header["step"])
    return trainer
