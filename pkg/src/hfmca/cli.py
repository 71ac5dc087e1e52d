"""Command-line surface: train, spectrum, telescope, knn, oracle.

All experiment state comes from one JSON config validated up front (unknown
keys are rejected everywhere); a single seed feeds named sub-streams for
data generation, initialization, augmentation and noise channels, so every
subcommand is bit-reproducible in all emitted files.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import pathlib
import sys

import numpy as np

from . import linalg
from .autodiff import AutodiffError
from .costs import CostError
from .data import (
    AugmentProtocol,
    DataError,
    LabeledDataset,
    generate_synthetic,
    load_cifar10,
)
from .network import NetworkError, NetworkSpec, build_network, desk_network_spec, geometry
from .oracle import OracleError, chain_joint, exact_decompose, read_joint_csv, telescoping_check
from .spectrum import (
    SpectrumError,
    compare_bases,
    extract_spectrum,
    write_spectrum_csv,
)
from .telescope import TelescopeError, local_ratio_field, propagate, write_response_csv, write_response_pgm
from .training import (
    STREAM_AUG,
    STREAM_EVAL,
    STREAM_INIT,
    Trainer,
    TrainConfig,
    TrainerError,
    checkpoint_save,
    CheckpointError,
    checkpoint_load,
    derive_seed,
    embed_images,
    eval_external_stats,
    eval_pair_stats,
    load_network,
    substream,
)

__all__ = ["main", "ConfigError", "RunConfig", "knn_predict"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

_STREAM_DATASET, _STREAM_TESTSET = 5, 6

_NUMERIC_ERRORS = (
    linalg.LinalgError,
    AutodiffError,
    CostError,
    SpectrumError,
    TelescopeError,
    TrainerError,
    np.linalg.LinAlgError,
)


class ConfigError(ValueError):
    pass


def _require_keys(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


class RunConfig:
    """Validated union of the experiment sections."""

    def __init__(self, raw: dict, seed_override: int | None = None):
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        _require_keys(
            raw, {"seed", "network", "train", "augment", "dataset", "emit", "spectrum", "chain"},
            "config",
        )
        self.seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

        train_raw = dict(raw.get("train", {}))
        if "seed" in train_raw:
            raise ConfigError("seed belongs at the top level of the config")
        try:
            self.train = TrainConfig.from_json({**train_raw, "seed": self.seed})
        except (TrainerError, TypeError) as exc:
            raise ConfigError(f"train section: {exc}") from exc

        aug_raw = dict(raw.get("augment", {}))
        _require_keys(aug_raw, {"crop_strength", "jitter_strength", "gray_strength"}, "augment")
        try:
            self.augment = AugmentProtocol(seed=derive_seed(self.seed, STREAM_AUG), **aug_raw)
        except DataError as exc:
            raise ConfigError(f"augment section: {exc}") from exc

        ds = dict(raw.get("dataset", {"kind": "synthetic"}))
        kind = ds.get("kind")
        if kind == "synthetic":
            _require_keys(
                ds, {"kind", "n", "classes", "height", "width", "test_n"}, "dataset"
            )
            self.dataset_cfg = {
                "kind": "synthetic",
                "n": int(ds.get("n", 256)),
                "classes": int(ds.get("classes", 4)),
                "height": int(ds.get("height", 16)),
                "width": int(ds.get("width", 16)),
                "test_n": int(ds.get("test_n", 64)),
            }
        elif kind == "cifar10":
            _require_keys(ds, {"kind", "path", "test_path"}, "dataset")
            if "path" not in ds:
                raise ConfigError("cifar10 dataset needs a path")
            self.dataset_cfg = {
                "kind": "cifar10",
                "path": ds["path"],
                "test_path": ds.get("test_path"),
            }
        else:
            raise ConfigError(f"dataset kind must be 'synthetic' or 'cifar10', got {kind!r}")

        net_raw = raw.get("network", {"preset": "desk"})
        if "preset" in net_raw:
            _require_keys(
                net_raw,
                {"preset", "input_channels", "feature_width", "hidden", "n_noise", "final_pool", "with_head"},
                "network",
            )
            if net_raw["preset"] != "desk":
                raise ConfigError(f"unknown network preset {net_raw['preset']!r}")
            kwargs = {k: v for k, v in net_raw.items() if k != "preset"}
            try:
                self.network_spec = desk_network_spec(views=self.train.views, **kwargs)
            except NetworkError as exc:
                raise ConfigError(f"network section: {exc}") from exc
        else:
            try:
                self.network_spec = NetworkSpec.from_json(net_raw)
                self.network_spec.validate()
            except NetworkError as exc:
                raise ConfigError(f"network section: {exc}") from exc

        emit = dict(raw.get("emit", {}))
        _require_keys(
            emit,
            {"costs_csv", "spectrum_csv", "response_maps", "spectrum_every", "checkpoint_every"},
            "emit",
        )
        self.emit = {
            "costs_csv": bool(emit.get("costs_csv", True)),
            "spectrum_csv": bool(emit.get("spectrum_csv", False)),
            "response_maps": bool(emit.get("response_maps", False)),
            "spectrum_every": int(emit.get("spectrum_every", 0)),
            "checkpoint_every": int(emit.get("checkpoint_every", 100)),
        }

        spec_raw = dict(raw.get("spectrum", {}))
        _require_keys(spec_raw, {"ridge", "batch"}, "spectrum")
        self.spectrum_ridge = float(spec_raw.get("ridge", 0.001))
        self.spectrum_batch = int(spec_raw.get("batch", 256))
        if self.spectrum_ridge < 0 or self.spectrum_batch < 1:
            raise ConfigError("spectrum section: ridge must be >= 0 and batch >= 1")

        self.chain = raw.get("chain")

    @classmethod
    def load(cls, path, seed_override: int | None = None) -> "RunConfig":
        try:
            text = pathlib.Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls(raw, seed_override)

    def build_dataset(self, test: bool = False) -> LabeledDataset:
        ds = self.dataset_cfg
        if ds["kind"] == "synthetic":
            n = ds["test_n"] if test else ds["n"]
            stream = _STREAM_TESTSET if test else _STREAM_DATASET
            return generate_synthetic(
                n, ds["classes"], (ds["height"], ds["width"]), seed=derive_seed(self.seed, stream)
            )
        path = ds["test_path"] if test else ds["path"]
        if path is None:
            raise ConfigError("cifar10 test_path required for this subcommand")
        return load_cifar10(path)

    def build_network(self):
        return build_network(self.network_spec, substream(self.seed, STREAM_INIT))


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.17g}"


def _write_costs_csv(path, trainer: Trainer) -> None:
    scales = trainer.network.scales
    pairs = list(range(1, scales)) if trainer.config.use_internal else []
    header = ["step", "external"] + [f"internal_{s}" for s in range(1, scales)] + ["total"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        log = trainer.log
        for i, step in enumerate(log.steps):
            row = [str(step), _fmt(log.external[i])]
            for s in range(1, scales):
                row.append(_fmt(log.internal[i].get(s)) if pairs else "")
            row.append(_fmt(log.total[i]))
            writer.writerow(row)


def _spectrum_results(cfg: RunConfig, network, images) -> list:
    results = []
    stats = eval_pair_stats(network, images, seed=cfg.seed)
    for s in sorted(stats):
        results.append(extract_spectrum(stats[s], cfg.spectrum_ridge, layer=s))
    if network.head is not None:
        ext = eval_external_stats(network, images, cfg.augment, cfg.train.views, seed=cfg.seed)
        results.append(extract_spectrum(ext, cfg.spectrum_ridge, layer=network.scales))
    return results


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = cfg.build_dataset()
    network = cfg.build_network()
    try:
        trainer = Trainer(network, dataset, cfg.train, cfg.augment)
    except (TrainerError, NetworkError) as exc:
        raise ConfigError(f"config and network are inconsistent: {exc}") from exc
    ck_path = out / "checkpoint.hfmc"
    checkpoint_save(trainer, ck_path)
    eval_images = dataset.images[: min(len(dataset), cfg.spectrum_batch)]
    snap_every = cfg.emit["spectrum_every"]
    ck_every = max(1, cfg.emit["checkpoint_every"])

    def snapshot(step: int) -> None:
        results = _spectrum_results(cfg, network, eval_images)
        write_spectrum_csv(out / f"spectrum_step_{step:06d}.csv", results)

    try:
        for _ in range(cfg.train.steps):
            entry = trainer.run_step()
            step = entry["step"]
            if snap_every and (step + 1) % snap_every == 0:
                snapshot(step + 1)
            if (step + 1) % ck_every == 0:
                checkpoint_save(trainer, ck_path)
    except _NUMERIC_ERRORS as exc:
        if cfg.emit["costs_csv"]:
            _write_costs_csv(out / "costs.csv", trainer)
        print(f"numerical failure at step {trainer.step_index}: {exc}", file=sys.stderr)
        print(f"last good checkpoint retained at {ck_path}", file=sys.stderr)
        return EXIT_NUMERIC
    checkpoint_save(trainer, ck_path)
    if cfg.emit["costs_csv"]:
        _write_costs_csv(out / "costs.csv", trainer)
    if cfg.emit["spectrum_csv"]:
        write_spectrum_csv(out / "spectrum.csv", _spectrum_results(cfg, network, eval_images))
    print(f"trained {cfg.train.steps} steps; artifacts in {out}")
    return EXIT_OK


def cmd_spectrum(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    network = load_network(args.checkpoint)
    dataset = cfg.build_dataset()
    images = dataset.images[: min(len(dataset), cfg.spectrum_batch)]
    if args.checkpoint_b is None:
        results = _spectrum_results(cfg, network, images)
        if args.layer is not None:
            results = [r for r in results if r.layer in args.layer]
            if not results:
                raise ConfigError(f"no spectra for layers {args.layer}")
        write_spectrum_csv(out / "spectrum.csv", results)
        for r in results:
            print(f"layer {r.layer}: leading eigenvalue {r.sigma[0]:.6f}")
        return EXIT_OK
    other = load_network(args.checkpoint_b)
    rows = _alignment_rows(cfg, network, other, images)
    with open(out / "alignment.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "rank", "alignment"])
        for layer, rank, val in rows:
            writer.writerow([layer, rank, f"{val:.17g}"])
    means: dict[int, list[float]] = {}
    for layer, _, val in rows:
        means.setdefault(layer, []).append(val)
    for layer in sorted(means):
        print(f"layer {layer}: mean alignment {np.mean(means[layer]):.6f}")
    return EXIT_OK


def _alignment_rows(cfg: RunConfig, net_a, net_b, images) -> list[tuple[int, int, float]]:
    from . import autodiff as ad

    rows = []
    with ad.no_grad():
        # identical noise-channel inputs for both models: alignment compares
        # what each does with the same evaluation batch
        rng_a = substream(cfg.seed, STREAM_EVAL, 10)
        rng_b = substream(cfg.seed, STREAM_EVAL, 10)
        feats_a, _ = net_a.forward_all(images, train=False, noise_rng=rng_a)
        feats_b, _ = net_b.forward_all(images, train=False, noise_rng=rng_b)
    for s, (fa, fb) in enumerate(zip(feats_a, feats_b), start=1):
        a = fa.data.transpose(0, 2, 3, 1).reshape(-1, fa.shape[1])
        b = fb.data.transpose(0, 2, 3, 1).reshape(-1, fb.shape[1])
        # alignment whitens in the pseudo-inverse limit: a ridge would turn a
        # self-comparison value for eigenvalue e into e/(e+ridge) rather than 1
        vals = compare_bases(a, b, ridge=0.0)
        rows.extend((s, rank, float(v)) for rank, v in enumerate(vals, start=1))
    return rows


def cmd_telescope(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    network = load_network(args.checkpoint)
    dataset = cfg.build_dataset()
    if not (0 <= args.image < len(dataset)):
        raise ConfigError(f"image index {args.image} outside dataset of {len(dataset)}")
    images = dataset.images[: min(len(dataset), cfg.spectrum_batch)]
    print("no spectrum cache: fitting spectra on the evaluation batch", file=sys.stderr)
    stats = eval_pair_stats(network, images, seed=cfg.seed)
    spectra = {s: extract_spectrum(stats[s], cfg.spectrum_ridge, layer=s) for s in stats}
    geom = geometry(network.spec, dataset.images.shape[2:])

    from . import autodiff as ad

    with ad.no_grad():
        rng = substream(cfg.seed, STREAM_EVAL, 2)
        feats, lowers = network.forward_all(
            dataset.images[args.image : args.image + 1], train=False, noise_rng=rng
        )
    fields = {
        s: local_ratio_field(
            lowers[s].data[0], feats[s].data[0], spectra[s], geom, s
        )
        for s in spectra
    }
    maps = propagate(fields, geom, source_id=args.image)
    wanted = set(args.layer) if args.layer else {m.layer for m in maps}
    emitted = 0
    for rmap in maps:
        if rmap.layer not in wanted:
            continue
        write_response_csv(out / f"response_L{rmap.layer}.csv", rmap)
        write_response_pgm(out / f"response_L{rmap.layer}.pgm", rmap)
        emitted += 1
    if not emitted:
        raise ConfigError(f"no response maps for layers {sorted(wanted)}")
    print(f"wrote {emitted} response maps for image {args.image} in {out}")
    return EXIT_OK


def knn_predict(
    train_feats: np.ndarray,
    train_labels: np.ndarray,
    test_feats: np.ndarray,
    k: int,
    class_count: int,
) -> np.ndarray:
    """Majority vote over the k Euclidean-nearest training embeddings; vote
    ties break toward the smallest class id (argmax on bincount)."""
    if k > train_feats.shape[0]:
        raise ConfigError(f"k={k} exceeds the training set size {train_feats.shape[0]}")
    d2 = (
        (test_feats**2).sum(axis=1)[:, None]
        + (train_feats**2).sum(axis=1)[None, :]
        - 2.0 * test_feats @ train_feats.T
    )
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    votes = train_labels[order]
    preds = np.empty(test_feats.shape[0], dtype=np.int64)
    for i in range(test_feats.shape[0]):
        preds[i] = np.argmax(np.bincount(votes[i], minlength=class_count))
    return preds


def cmd_knn(args) -> int:
    cfg = RunConfig.load(args.config, args.seed)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    network = load_network(args.checkpoint)
    train_set = cfg.build_dataset()
    test_set = cfg.build_dataset(test=True)
    train_feats = embed_images(network, train_set.images, seed=cfg.seed)
    test_feats = embed_images(network, test_set.images, seed=cfg.seed)
    preds = knn_predict(train_feats, train_set.labels, test_feats, args.k, train_set.class_count)
    accuracy = float((preds == test_set.labels).mean())
    lines = [
        f"k: {args.k}",
        "distance: euclidean",
        "tie_break: smallest class id",
        f"train_size: {len(train_set)}",
        f"test_size: {len(test_set)}",
        f"accuracy: {accuracy:.4f}",
    ]
    (out / "knn_report.txt").write_text("\n".join(lines) + "\n")
    print(f"accuracy: {accuracy:.4f}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.joint is not None:
        table = read_joint_csv(args.joint)
        dec = exact_decompose(table)
        _write_basis_csv(out / "basis_lower.csv", dec.phi)
        _write_basis_csv(out / "basis_upper.csv", dec.psi)
        print("sigma: " + " ".join(f"{v:.17g}" for v in dec.sigma))
        return EXIT_OK
    cfg = RunConfig.load(args.config, args.seed)
    if cfg.chain is None:
        raise ConfigError("oracle needs --joint or a 'chain' config section")
    chain_cfg = dict(cfg.chain)
    _require_keys(chain_cfg, {"top", "kernels"}, "chain")
    chain = chain_joint(
        np.asarray(chain_cfg["top"], dtype=np.float64),
        [np.asarray(k, dtype=np.float64) for k in chain_cfg["kernels"]],
    )
    for s in range(1, chain.levels):
        dec = exact_decompose(chain.pair_joint(s))
        print(f"pair {s}: sigma " + " ".join(f"{v:.17g}" for v in dec.sigma))
        _write_basis_csv(out / f"basis_pair{s}_lower.csv", dec.phi)
        _write_basis_csv(out / f"basis_pair{s}_upper.csv", dec.psi)
    defect = telescoping_check(chain)
    print(f"telescoping_defect: {defect:.17g}")
    return EXIT_OK


def _write_basis_csv(path, table: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["symbol", "component", "value"])
        for x in range(table.shape[0]):
            for k in range(table.shape[1]):
                writer.writerow([x, k + 1, f"{table[x, k]:.17g}"])


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hfmca",
        description="Hierarchical dependence training, spectra and response maps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="trained checkpoint")

    p_train = sub.add_parser("train", help="run a training schedule")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_spec = sub.add_parser("spectrum", help="extract per-layer eigenspectra")
    common(p_spec, checkpoint=True)
    p_spec.add_argument("--checkpoint-b", default=None, help="second model for alignment")
    p_spec.add_argument("--layer", type=int, action="append", default=None)
    p_spec.set_defaults(func=cmd_spectrum)

    p_tel = sub.add_parser("telescope", help="emit response maps for one image")
    common(p_tel, checkpoint=True)
    p_tel.add_argument("--image", type=int, default=0, help="dataset image index")
    p_tel.add_argument("--layer", type=int, action="append", default=None)
    p_tel.set_defaults(func=cmd_telescope)

    p_knn = sub.add_parser("knn", help="k-nearest-neighbor evaluation")
    common(p_knn, checkpoint=True)
    p_knn.add_argument("--k", type=int, default=5)
    p_knn.set_defaults(func=cmd_knn)

    p_oracle = sub.add_parser("oracle", help="exact finite-alphabet reference")
    p_oracle.add_argument("--config", default=None, help="config with a 'chain' section")
    p_oracle.add_argument("--joint", default=None, help="joint table CSV (x,y,probability)")
    p_oracle.add_argument("--out", required=True)
    p_oracle.add_argument("--seed", type=int, default=None)
    p_oracle.set_defaults(func=cmd_oracle)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        if args.command == "oracle" and args.joint is None and args.config is None:
            raise ConfigError("oracle needs --joint or --config")
        return args.func(args)
    except (ConfigError, NetworkError, OracleError, DataError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
