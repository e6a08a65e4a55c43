"""Command-line entry point: ``rnnprop {gen-data,train,propose,eval}``.

Exit codes: 0 ok, 2 I/O, 3 config, 4 non-finite gradient, 5 model/feature
dimension mismatch, 6 empty dataset.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace

import numpy as np

from .imagecore import SceneConfig, generate_scene, gt_to_json, mix_seed, read_image, write_image, write_mask
from .inference import MergePolicy, proposals_from_prepared, write_proposal_masks, write_proposals_csv
from .pipeline import DEFAULT_SEG_KS, load_scene, prepare_image, scene_paths, training_examples
from .regionfeat import DEFAULT_DIMS
from .rnnmodel import ModelFormatError, ModelParams, init_params
from .training import NonFiniteGradientError, TrainConfig, train, write_train_log

log = logging.getLogger("rnnprop")

EXIT_IO, EXIT_CONFIG, EXIT_NUMERIC, EXIT_MISMATCH, EXIT_EMPTY = 2, 3, 4, 5, 6


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    policy: MergePolicy = field(default_factory=MergePolicy)
    seg_ks: tuple = DEFAULT_SEG_KS
    F: int = DEFAULT_DIMS
    D: int = 32

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {"scene", "train", "policy", "seg_ks", "F", "D"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(
            scene=SceneConfig.from_dict(doc.get("scene", {})),
            train=TrainConfig.from_dict(doc.get("train", {})),
            policy=MergePolicy(**doc.get("policy", {})),
            seg_ks=tuple(doc.get("seg_ks", DEFAULT_SEG_KS)),
            F=int(doc.get("F", DEFAULT_DIMS)),
            D=int(doc.get("D", 32)),
        )


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise CliError(EXIT_CONFIG, f"{path}: top level must be a JSON object")
    try:
        return RunConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"{path}: {exc}") from exc


def _load_model(path) -> ModelParams:
    try:
        return ModelParams.load(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read model {path}: {exc.strerror}") from exc
    except ModelFormatError as exc:
        raise CliError(EXIT_MISMATCH, f"{path}: {exc}") from exc


def _check_dims(params: ModelParams, cfg: RunConfig) -> None:
    if params.F != cfg.F:
        raise CliError(EXIT_MISMATCH, f"model dimension mismatch: expected F={cfg.F}, found F={params.F} "
                                      f"(D={params.D})")


def _load_dataset(data_dir):
    if not os.path.isdir(data_dir):
        raise CliError(EXIT_IO, f"data directory not found: {data_dir}")
    stems = scene_paths(data_dir)
    if not stems:
        raise CliError(EXIT_EMPTY, f"no scenes in {data_dir}")
    try:
        return [(os.path.basename(s), *load_scene(s)) for s in stems]
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot load dataset: {exc}") from exc


# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> None:
    cfg = load_config(args.config)
    try:
        os.makedirs(args.out, exist_ok=True)
        for i in range(args.count):
            image, gt = generate_scene(replace(cfg.scene, seed=mix_seed(cfg.scene.seed, i)))
            stem = os.path.join(args.out, f"scene_{i:04d}")
            write_image(image, stem + ".ppm")
            write_mask(gt.mask, stem + ".mask.pgm")
            with open(stem + ".gt.json", "w") as fh:
                fh.write(gt_to_json(gt, os.path.basename(stem) + ".mask.pgm"))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write scenes: {exc}") from exc
    log.info("wrote %d scenes to %s", args.count, args.out)


def cmd_train(args) -> None:
    cfg = load_config(args.config)
    scenes = _load_dataset(args.data)
    examples = []
    for name, image, gt in scenes:
        examples += training_examples(prepare_image(image, cfg.seg_ks, cfg.F), gt, name)
    params = init_params(cfg.F, cfg.D, cfg.train.seed)
    try:
        params, history = train(examples, cfg.train, params)
    except NonFiniteGradientError as exc:
        raise CliError(EXIT_NUMERIC, str(exc)) from exc
    log_path = args.log or os.path.join(os.path.dirname(os.path.abspath(args.model_out)), "train_log.csv")
    try:
        params.save(args.model_out)
        write_train_log(history, log_path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write model or log: {exc}") from exc


def _policy_from_args(args, cfg: RunConfig) -> MergePolicy:
    base = cfg.policy
    kind = args.policy or base.kind
    k = args.k if args.k is not None else base.k
    repeats = args.repeats if args.repeats is not None else base.repeats
    seed = args.seed if args.seed is not None else base.seed
    if kind == "greedy":
        return MergePolicy.greedy(seed)
    return MergePolicy("random", k, repeats, seed)


def cmd_propose(args) -> None:
    cfg = load_config(args.config)
    params = _load_model(args.model)
    _check_dims(params, cfg)
    try:
        image = read_image(args.image)
    except (OSError, ValueError) as exc:
        raise CliError(EXIT_IO, f"cannot read image {args.image}: {exc}") from exc
    policy = _policy_from_args(args, cfg)
    props = proposals_from_prepared(prepare_image(image, cfg.seg_ks, cfg.F), params, policy, args.n)
    try:
        os.makedirs(args.out, exist_ok=True)
        write_proposals_csv(props, os.path.join(args.out, "proposals.csv"))
        if args.masks:
            write_proposal_masks(props, args.out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write proposals: {exc}") from exc


def cmd_eval(args) -> None:
    from .evalkit import compare_policies, evaluate, write_comparison_csv, write_report_csv, write_size_csv

    cfg = load_config(args.config)
    params = _load_model(args.model)
    _check_dims(params, cfg)
    try:
        budgets = [int(b) for b in args.budgets.split(",") if b.strip()]
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"bad --budgets: {args.budgets}") from exc
    if not budgets or min(budgets) < 0:
        raise CliError(EXIT_CONFIG, f"bad --budgets: {args.budgets}")
    scenes = _load_dataset(args.data)
    gts = [gt for _, _, gt in scenes]
    if sum(len(g.boxes) for g in gts) == 0:
        raise CliError(EXIT_EMPTY, "dataset has no ground-truth objects")
    prepared = [prepare_image(image, cfg.seg_ks, cfg.F) for _, image, _ in scenes]

    if args.compare:
        base = cfg.policy
        policies = {"greedy": MergePolicy.greedy(base.seed)}
        for r in (1, 2, 4, 8):
            policies[f"random@{r}"] = MergePolicy("random", base.k, r, base.seed)
        reports = compare_policies(prepared, gts, params, policies, budgets)
    else:
        policy = cfg.policy
        name = "greedy" if policy.kind == "greedy" else f"random@{policy.repeats}"
        n_max = max(budgets)
        props = [proposals_from_prepared(p, params, policy, n_max) for p in prepared]
        boxes = [np.array([q.box for q in pl]).reshape(-1, 4) for pl in props]
        reports = [evaluate(name, boxes, [g.box_array() for g in gts], [g.instance_areas() for g in gts],
                            [g.mask.width * g.mask.height for g in gts], budgets)]
    try:
        os.makedirs(args.out, exist_ok=True)
        write_report_csv(reports, os.path.join(args.out, "eval_report.csv"))
        write_size_csv(reports, os.path.join(args.out, "eval_by_size.csv"))
        if args.compare:
            write_comparison_csv(reports, os.path.join(args.out, "eval_compare.csv"))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write report: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rnnprop", description="Learned hierarchical region merging for object proposals.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic scenes")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a scene directory")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--model-out", required=True)
    t.add_argument("--log", help="training log CSV (default: train_log.csv next to the model)")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("propose", help="rank proposals for one PPM image")
    q.add_argument("--model", required=True)
    q.add_argument("--image", required=True)
    q.add_argument("--n", type=int, default=1000)
    q.add_argument("--masks", action="store_true", help="also write one PGM mask per proposal")
    q.add_argument("--policy", choices=("greedy", "random"))
    q.add_argument("--k", type=int)
    q.add_argument("--repeats", type=int)
    q.add_argument("--seed", type=int)
    q.add_argument("--config")
    q.add_argument("--out", default=".")
    q.set_defaults(func=cmd_propose)

    e = sub.add_parser("eval", help="recall / AR report over a scene directory")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--budgets", default="100,500,1000")
    e.add_argument("--compare", action="store_true", help="greedy vs random with 1, 2, 4, 8 repeats")
    e.add_argument("--config")
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except CliError as exc:
        print(f"rnnprop {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except ValueError as exc:
        print(f"rnnprop {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
