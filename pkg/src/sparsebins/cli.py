"""Command line entry point: ``sparsebins {synth,train,propose,eval,select-bins}``.

Settings come from dataclass defaults, then an optional YAML ``--config``
file, then explicit flags.  The effective settings are written to
``<out>/effective_config.yaml`` for every run.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import cascade, data_io, evaluation
from .cascade import CascadeProposer, SampleSpec
from .edge_bev import DEFAULT_STRIPE_FRACTIONS, N_ORIENTATIONS, build_bev_bank
from .sparse_svm import (GroupStructure, TrainConfig, lambda_max, select_regularizer_for_count,
                         train_group_lasso_svm)
from .spp import DEFAULT_GRID_SIZES, build_spp_bank

logger = logging.getLogger("sparsebins")


@dataclass
class RunConfig:
    manifest: str | None = None
    out_dir: str = "out"
    stage1_model: str | None = None
    stage2_model: str | None = None
    proposals: str | None = None
    annotations: str | None = None
    n: int = 100
    variant: str = "sspb"
    nms_threshold: float = cascade.SSPB60_THRESHOLD
    arnms_thresholds: list = field(default_factory=lambda: list(cascade.ARNMS_THRESHOLDS))
    pool_cap: int = cascade.POOL_CAP
    output_cap: int = cascade.STAGE_ONE_OUTPUT
    spp1_bins: int = 3
    spp2_bins: int = 43
    bev_bins: int = 311
    lam: float | None = None
    C: float = 1.0
    solver_tol: float = 1e-6
    max_iter: int = 2000
    stripe_fractions: list = field(default_factory=lambda: list(DEFAULT_STRIPE_FRACTIONS))
    grid_sizes: list = field(default_factory=lambda: list(DEFAULT_GRID_SIZES))
    budgets: list = field(default_factory=lambda: list(evaluation.DEFAULT_BUDGETS))
    method: str = "sspb"
    feature: str = "spp"
    target: int | None = None
    lambdas: list | None = None
    n_images: int = 50
    seed: int = 0
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)

    def estimator(self) -> CascadeProposer:
        return CascadeProposer(
            n_proposals=self.n, variant=self.variant, spp1_bins=self.spp1_bins,
            spp2_bins=self.spp2_bins, bev_bins=self.bev_bins, C=self.C, lam=self.lam,
            arnms_thresholds=tuple(self.arnms_thresholds), greedy_threshold=self.nms_threshold,
            pool_cap=self.pool_cap, output_cap=self.output_cap,
            stripe_fractions=tuple(self.stripe_fractions), grid_sizes=tuple(self.grid_sizes),
            solver_tol=self.solver_tol, max_iter=self.max_iter, random_state=self.seed,
            n_jobs=self.threads)


def _list_of(kind):
    def parse(text):
        return [kind(v) for v in text.replace(",", " ").split()]
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsebins", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        # defaults are None so that only explicit flags override the config file
        p.add_argument("--config", help="YAML file with RunConfig keys")
        p.add_argument("--out", dest="out_dir")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int)
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    synth = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    synth.add_argument("--n-images", dest="n_images", type=int)

    def model_flags(p):
        p.add_argument("--manifest")
        p.add_argument("--spp1-bins", dest="spp1_bins", type=int)
        p.add_argument("--spp2-bins", dest="spp2_bins", type=int)
        p.add_argument("--bev-bins", dest="bev_bins", type=int)
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--C", dest="C", type=float)
        p.add_argument("--solver-tol", dest="solver_tol", type=float)
        p.add_argument("--max-iter", dest="max_iter", type=int)
        p.add_argument("--pool-cap", dest="pool_cap", type=int)
        p.add_argument("--output-cap", dest="output_cap", type=int)
        p.add_argument("--stage1-model", dest="stage1_model")
        p.add_argument("--stage2-model", dest="stage2_model")
        return p

    common(model_flags(sub.add_parser("train", help="train both cascade stages")))

    prop = common(model_flags(sub.add_parser("propose", help="rank proposals for every image")))
    prop.add_argument("--n", type=int)
    prop.add_argument("--variant", choices=["sspb", "sspb60"])
    prop.add_argument("--nms-threshold", dest="nms_threshold", type=float)
    prop.add_argument("--arnms-thresholds", dest="arnms_thresholds", type=_list_of(float))

    ev = common(sub.add_parser("eval", help="overlap-recall curves and average recall"))
    ev.add_argument("--manifest")
    ev.add_argument("--annotations", help="Pascal VOC Annotations directory (instead of manifest GT)")
    ev.add_argument("--proposals", help="proposal JSON-lines file or directory of them")
    ev.add_argument("--budgets", type=_list_of(int))
    ev.add_argument("--method")

    sel = common(model_flags(sub.add_parser("select-bins", help="group-lasso bin selection sweep")))
    sel.add_argument("--feature", choices=["spp", "bev"])
    sel.add_argument("--target", type=int)
    sel.add_argument("--lambdas", type=_list_of(float))
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            values.update(yaml.safe_load(fh) or {})
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    for key, val in vars(args).items():
        if key in known and val is not None:
            values[key] = val
    return RunConfig(**values)


def dump_config(cfg: RunConfig, out_dir: Path, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "effective_config.yaml", "w") as fh:
        yaml.safe_dump({"command": command, **dataclasses.asdict(cfg)}, fh, sort_keys=True)


def _require(cfg: RunConfig, *names):
    for name in names:
        if getattr(cfg, name) is None:
            raise ValueError(f"--{name.replace('_', '-')} is required")


def _load_bundles(cfg: RunConfig):
    _require(cfg, "manifest")
    manifest = data_io.load_manifest(cfg.manifest)
    return cascade._map(data_io.load_bundle, manifest.images, cfg.threads)


def cmd_synth(cfg: RunConfig) -> int:
    path = data_io.write_synthetic_dataset(cfg.out_dir, cfg.n_images, seed=cfg.seed)
    print(f"manifest: {path}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    bundles = _load_bundles(cfg)
    est = cfg.estimator().fit(bundles)
    p1, p2 = est.save(cfg.out_dir)
    print(f"stage 1: {len(est.stage_one_.spp_selection)} SPP bins -> {p1}")
    print(f"stage 2: {len(est.stage_two_.bev_selection)} BEV bins, "
          f"{len(est.stage_two_.spp_selection)} SPP bins -> {p2}")
    return 0


def cmd_propose(cfg: RunConfig) -> int:
    model_dir = Path(cfg.out_dir)
    s1 = cfg.stage1_model or model_dir / "stage1.sspb"
    s2 = cfg.stage2_model or model_dir / "stage2.sspb"
    for p in (s1, s2):
        if not Path(p).is_file():
            raise FileNotFoundError(f"missing model file {p}")
    est = cfg.estimator().load(s1, s2)
    bundles = _load_bundles(cfg)
    ranked = est.predict_many(bundles)
    out = model_dir / "proposals"
    out.mkdir(parents=True, exist_ok=True)
    for bundle, r in zip(bundles, ranked):
        data_io.write_proposals(out / f"{bundle.image_id}.jsonl", {bundle.image_id: (r.boxes, r.scores)})
    print(f"wrote proposals for {len(bundles)} images to {out}")
    return 0


def _read_all_proposals(path) -> dict:
    path = Path(path)
    files = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    props = {}
    for f in files:
        for image_id, (boxes, _) in data_io.read_proposals(f).items():
            props[image_id] = boxes
    return props


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "proposals")
    if cfg.annotations:
        gt = {k: v.boxes for k, v in data_io.load_pascal_annotations(cfg.annotations).items()}
    else:
        _require(cfg, "manifest")
        gt = {rec.image_id: rec.gt.boxes for rec in data_io.load_manifest(cfg.manifest).images}
    props = _read_all_proposals(cfg.proposals)
    most = max((len(v) for v in props.values()), default=0)
    for n in cfg.budgets:
        if n > most:
            warnings.warn(f"budget {n} exceeds the largest proposal list ({most}); evaluation saturates")
    curves = evaluation.curve_sweep(gt, props, cfg.budgets)
    summary = evaluation.write_report(cfg.out_dir, curves, cfg.method)
    for n, ar in summary.items():
        print(f"{cfg.method} budget={n} AR={ar:.4f}")
    return 0


def cmd_select_bins(cfg: RunConfig) -> int:
    bundles = _load_bundles(cfg)
    bev_bank = build_bev_bank(tuple(cfg.stripe_fractions))
    spp_bank = build_spp_bank(tuple(cfg.grid_sizes))
    gt = {b.image_id: b.gt for b in bundles if len(b.gt)}
    sizes = {b.image_id: (b.feature_map.image_width, b.feature_map.image_height) for b in bundles}
    pos, neg = cascade.assemble_training_samples(gt, sizes, SampleSpec(seed=cfg.seed))
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    X_bev, X_spp, _ = cascade.training_descriptors(bundles, [pos, neg], bev_bank, spp_bank, cfg.threads)
    if cfg.feature == "bev":
        X, groups = X_bev, GroupStructure.uniform(bev_bank.n_bins, N_ORIENTATIONS)
    else:
        X, groups = X_spp, GroupStructure.uniform(spp_bank.n_bins, bundles[0].feature_map.channels)
    solver = TrainConfig(tol=cfg.solver_tol, max_epochs=cfg.max_iter, seed=cfg.seed)
    rows = []
    if cfg.target is not None:
        lam, sel = select_regularizer_for_count(X, y, groups, cfg.target, solver)
        rows.append({"lambda": lam, "kept": len(sel), "bins": sel.kept.tolist()})
    else:
        lams = cfg.lambdas or list(np.linspace(0.0, lambda_max(X, y, groups), 10))
        for lam in lams:
            _, sel = train_group_lasso_svm(X, y, groups, dataclasses.replace(solver, lam=float(lam)))
            rows.append({"lambda": float(lam), "kept": len(sel), "bins": sel.kept.tolist()})
    for row in rows:
        print(f"{cfg.feature} lambda={row['lambda']:.6g} kept={row['kept']}")
    out = Path(cfg.out_dir)
    with open(out / f"bin_sweep_{cfg.feature}.json", "w") as fh:
        json.dump(rows, fh, indent=1)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "propose": cmd_propose, "eval": cmd_eval,
            "select-bins": cmd_select_bins}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        dump_config(cfg, Path(cfg.out_dir), args.command)
        return COMMANDS[args.command](cfg)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
