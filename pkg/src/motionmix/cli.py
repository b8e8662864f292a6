"""Command-line surface: generate, train, predict, aggregate, eval, ablate.

Every subcommand is deterministic under --seed (falling back to the
MOTIONMIX_SEED environment variable, then 0).  A JSON file passed via
--config supplies flag defaults; explicitly given flags win.  Exit codes:
0 success, 2 validation/parse error, 3 numeric failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from .aggregation import aggregate
from .data_io import (
    SyntheticConfig,
    entry_heads,
    entry_prediction,
    generate_dataset,
    load_dataset,
    load_manifest,
    load_predictions,
    save_predictions,
)
from .errors import (
    EXIT_IO,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_VALIDATION,
    NumericError,
    ValidationError,
)
from .metrics import evaluate_cases, overlap_rate, write_case_csv
from .model import ModelConfig, PredictionModel
from .scene import H_COL, LEN_COL, VALID_COL, WID_COL, X_COL, Y_COL
from .trainer import (
    TrainConfig,
    collect_futures,
    kmeans_anchors,
    prepare_examples,
    train,
    write_loss_csv,
)

# fork-shared state for --jobs workers
_POOL_CTX: dict = {}


def _resolve_seed(ns) -> int:
    if getattr(ns, "seed", None) is not None:
        return int(ns.seed)
    return int(os.environ.get("MOTIONMIX_SEED", "0"))


def _parallel_map(fn, items, jobs: int) -> list:
    """Order-preserving map, forking `jobs` workers when jobs > 1."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    import multiprocessing as mp

    with mp.get_context("fork").Pool(processes=jobs) as pool:
        return pool.map(fn, items)


# ---------------------------------------------------------------------------
# generate


def cmd_generate(ns) -> int:
    probs = json.loads(ns.mode_probs) if ns.mode_probs else None
    cfg = SyntheticConfig(
        template=ns.template,
        count=ns.count,
        seed=_resolve_seed(ns),
        noise_sigma=ns.sigma,
        mode_probs=probs,
        history_steps=ns.history_steps,
        future_steps=ns.future_steps,
        dt=ns.dt,
        max_neighbors=ns.max_neighbors,
    )
    manifest = generate_dataset(cfg, ns.out, val_fraction=ns.val_fraction)
    n_train = len(manifest["splits"]["train"])
    n_val = len(manifest["splits"]["val"])
    print(f"wrote {n_train} train + {n_val} val scenarios to {ns.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _model_config_from_flags(ns, data_cfg: dict) -> ModelConfig:
    return ModelConfig(
        history_steps=int(data_cfg["history_steps"]),
        future_steps=int(data_cfg["future_steps"]),
        dt=float(data_cfg["dt"]),
        lstm_hidden=ns.width,
        mcg_width=ns.width,
        mcg_depth=ns.depth,
        n_heads=ns.heads,
        modes_per_head=ns.modes_per_head,
        n_modes=ns.modes,
        decoder=ns.decoder,
        poly_degree=ns.poly_degree,
        anchor_dim=ns.width,
        anchor_mode=ns.anchors,
        max_road_segments=ns.road_segments,
        replicate_encoder=ns.replicate_encoder,
        seed=_resolve_seed(ns),
    )


def _train_once(ns, model_cfg: ModelConfig, examples) -> tuple:
    model = PredictionModel.build(model_cfg)
    if model_cfg.anchor_mode == "static":
        futures = collect_futures(examples)
        anchors = kmeans_anchors(futures, model_cfg.modes_per_head,
                                 seed=model_cfg.seed)
        model.set_static_anchors(anchors)
    tc = TrainConfig(
        lr0=ns.lr,
        batch=ns.batch,
        decay=ns.lr_decay,
        decay_every_epochs=ns.decay_epochs,
        steps=ns.steps,
        seed=_resolve_seed(ns),
        ensemble_heads=model_cfg.n_heads,
        modes_per_head=model_cfg.modes_per_head,
        bag_prob=ns.bag_prob,
    )
    curve = train(model, examples, tc)
    return model, curve


def cmd_train(ns) -> int:
    manifest = load_manifest(ns.data)
    scenarios = load_dataset(ns.data, "train")
    examples = prepare_examples(scenarios)
    if not examples:
        raise ValidationError("training split has no usable examples")
    model_cfg = _model_config_from_flags(ns, manifest["config"])
    model, curve = _train_once(ns, model_cfg, examples)
    model.save(ns.out)
    loss_csv = ns.loss_csv or (str(ns.out) + ".loss.csv")
    write_loss_csv(curve, loss_csv)
    print(f"trained {len(curve)} steps on {len(examples)} examples; "
          f"final loss {curve[-1][1]:.4f}; checkpoint {ns.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# predict


def _scenario_id(scn, index: int) -> str:
    return str(scn.meta.get("id", f"{index:06d}"))


def _predict_worker(index: int):
    model = _POOL_CTX["model"]
    scn = _POOL_CTX["scenarios"][index]
    out = []
    for aid in scn.target_ids:
        gmms = model.predict(scn, aid)
        out.append({
            "scenario": _scenario_id(scn, index),
            "agent": aid,
            "heads": [g.to_dict() for g in gmms],
        })
    return out

def cmd_predict(ns) -> int:
    model = PredictionModel.load(ns.checkpoint)
    cfg = model.config
    if ns.heads is not None and ns.heads != cfg.n_heads:
        raise ValidationError(
            f"--heads {ns.heads} does not match the checkpoint (E={cfg.n_heads})")
    if ns.modes_per_head is not None and ns.modes_per_head != cfg.modes_per_head:
        raise ValidationError(
            f"--modes-per-head {ns.modes_per_head} does not match the checkpoint "
            f"(L={cfg.modes_per_head})")
    scenarios = load_dataset(ns.data, ns.split)
    _POOL_CTX["model"] = model
    _POOL_CTX["scenarios"] = scenarios
    try:
        chunks = _parallel_map(_predict_worker, range(len(scenarios)), ns.jobs)
    finally:
        _POOL_CTX.clear()
    entries = [e for chunk in chunks for e in chunk]
    save_predictions(ns.out, entries)
    print(f"wrote {len(entries)} predictions ({cfg.n_heads} heads x "
          f"{cfg.modes_per_head} modes) to {ns.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# aggregate


def _aggregate_worker(entry: dict) -> dict:
    agg = aggregate(entry_heads(entry), _POOL_CTX["m"], tau=_POOL_CTX["tau"],
                    max_iters=_POOL_CTX["max_iters"])
    return {"scenario": entry["scenario"], "agent": entry["agent"],
            "prediction": agg.to_dict()}


def cmd_aggregate(ns) -> int:
    entries = load_predictions(ns.predictions)
    for e in entries:
        if "heads" not in e:
            raise ValidationError(
                f"entry {e.get('scenario')}/{e.get('agent')} has no per-head "
                "mixtures; was this file already aggregated?")
    _POOL_CTX.update({"m": ns.modes, "tau": ns.tau, "max_iters": ns.max_iters})
    try:
        out = _parallel_map(_aggregate_worker, entries, ns.jobs)
    finally:
        _POOL_CTX.clear()
    save_predictions(ns.out, out)
    print(f"aggregated {len(out)} entries to {ns.modes} modes in {ns.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _future_groundtruth(scn, agent_id: str):
    tr = scn.track(agent_id)
    fut = tr.states[scn.current_index + 1:]
    return (fut[:, X_COL:Y_COL + 1], fut[:, H_COL], fut[:, VALID_COL] > 0.5)


def _scenario_overlap(scn, preds: dict):
    """(hits, n_predicted) for one scenario's predicted agents."""
    gt_futures = {}
    dims = {}
    for tr in scn.tracks:
        xy, heading, valid = _future_groundtruth(scn, tr.id)
        gt_futures[tr.id] = (xy, heading, valid)
        row = tr.states[scn.current_index]
        dims[tr.id] = (max(float(row[LEN_COL]), 0.2), max(float(row[WID_COL]), 0.2))
    rate = overlap_rate(preds, gt_futures, dims)
    return rate * len(preds), len(preds)


def _build_eval_cases(entries, scenarios):
    by_id = {}
    for i, scn in enumerate(scenarios):
        by_id[_scenario_id(scn, i)] = scn
    cases = []
    per_scene_preds: dict = {}
    for e in entries:
        sid = e["scenario"]
        if sid not in by_id:
            raise ValidationError(f"predictions reference unknown scenario {sid!r}")
        scn = by_id[sid]
        pred = entry_prediction(e)
        gt_xy, _, gt_valid = _future_groundtruth(scn, e["agent"])
        if pred.n_steps != len(gt_xy):
            raise ValidationError(
                f"entry {sid}/{e['agent']}: prediction horizon {pred.n_steps} "
                f"!= dataset horizon {len(gt_xy)}")
        cases.append((sid, e["agent"], pred, gt_xy, gt_valid))
        per_scene_preds.setdefault(sid, {})[e["agent"]] = pred
    return cases, per_scene_preds, by_id


def cmd_eval(ns) -> int:
    entries = load_predictions(ns.predictions)
    scenarios = load_dataset(ns.data, ns.split)
    manifest = load_manifest(ns.data)
    horizon = manifest["config"]["future_steps"] * manifest["config"]["dt"]
    t = ns.t if ns.t is not None else horizon
    cases, per_scene, by_id = _build_eval_cases(entries, scenarios)
    hits = 0.0
    n_pred = 0
    for sid, preds in per_scene.items():
        h, n = _scenario_overlap(by_id[sid], preds)
        hits += h
        n_pred += n
    overlap = (hits / n_pred) if n_pred else 0.0
    report, rows = evaluate_cases(cases, k=ns.k, t=t, d=ns.d,
                                  tau_map=ns.map_tau, overlap=overlap)
    report.to_json(ns.report)
    if ns.csv:
        write_case_csv(ns.csv, rows)
    print(f"examples: {len(cases)}")
    print(f"minADE@{ns.k}: {report.min_ade:.4f} m")
    print(f"minDE@{ns.k},{t:g}s: {report.min_de:.4f} m")
    print(f"MR (simple) @{ns.k},{t:g}s,{ns.d:g}m: {report.mr_simple:.4f}")
    print(f"mAP@{ns.map_tau:g}m: {report.map_overall:.4f}")
    print(f"overlap rate: {overlap:.4f}")
    tri_h = "n/a" if report.tri_h is None else f"{report.tri_h:.4f}"
    tri_hc = "n/a" if report.tri_hc is None else f"{report.tri_hc:.4f}"
    print(f"TRI rates c/h/hc: {report.tri_c:.4f} / {tri_h} / {tri_hc}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablate

ABLATE_PRESETS = ("trajectory_repr", "ensembling", "anchors", "mcg_depth")


def _ablate_variants(preset: str) -> list:
    """(name, model overrides, aggregate M or None) per variant."""
    if preset == "trajectory_repr":
        return [(dec, {"decoder": dec}, None) for dec in
                ("raw_states", "raw_states_with_heading", "control", "polynomial")]
    if preset == "ensembling":
        return [
            ("e1_l6", {"heads": 1, "modes_per_head": 6}, None),
            ("e2_l12", {"heads": 2, "modes_per_head": 12}, 6),
            ("e3_l18", {"heads": 3, "modes_per_head": 18}, 6),
        ]
    if preset == "anchors":
        return [("learned", {"anchors": "learned"}, None),
                ("static_kmeans", {"anchors": "static"}, None)]
    if preset == "mcg_depth":
        return [(f"depth{d}", {"depth": d}, None) for d in (1, 3, 5)]
    raise ValidationError(f"unknown preset {preset!r}")


def cmd_ablate(ns) -> int:
    manifest = load_manifest(ns.data)
    train_scns = load_dataset(ns.data, "train")
    val_scns = load_dataset(ns.data, "val")
    train_examples = prepare_examples(train_scns)
    if not train_examples:
        raise ValidationError("training split has no usable examples")
    horizon = manifest["config"]["future_steps"] * manifest["config"]["dt"]
    rows = []
    for name, overrides, agg_m in _ablate_variants(ns.preset):
        sub = argparse.Namespace(**vars(ns))
        for key, val in overrides.items():
            setattr(sub, key, val)
        model_cfg = _model_config_from_flags(sub, manifest["config"])
        model, curve = _train_once(sub, model_cfg, train_examples)
        entries = []
        for i, scn in enumerate(val_scns):
            for aid in scn.target_ids:
                gmms = model.predict(scn, aid)
                entries.append({"scenario": _scenario_id(scn, i), "agent": aid,
                                "heads": [g.to_dict() for g in gmms]})
        if agg_m is not None or model_cfg.n_heads > 1 or \
                model_cfg.modes_per_head > ns.modes:
            m = agg_m if agg_m is not None else ns.modes
            _POOL_CTX.update({"m": m, "tau": ns.tau, "max_iters": 25})
            try:
                entries = _parallel_map(_aggregate_worker, entries, ns.jobs)
            finally:
                _POOL_CTX.clear()
        cases, _, _ = _build_eval_cases(entries, val_scns)
        report, _ = evaluate_cases(cases, k=ns.modes, t=horizon, d=ns.d)
        rows.append({
            "preset": ns.preset, "variant": name,
            "final_loss": curve[-1][1],
            "min_ade": report.min_ade, "min_de": report.min_de,
            "mr_simple": report.mr_simple, "map": report.map_overall,
            "tri_c": report.tri_c,
            "tri_h": "" if report.tri_h is None else report.tri_h,
            "tri_hc": "" if report.tri_hc is None else report.tri_hc,
        })
        print(f"[{ns.preset}/{name}] minADE {report.min_ade:.3f} "
              f"minDE {report.min_de:.3f} MR {report.mr_simple:.3f}")
    with open(ns.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} variants to {ns.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_common(p):
    p.add_argument("--seed", type=int, default=None,
                   help="RNG seed (default: $MOTIONMIX_SEED or 0)")
    p.add_argument("--config", default=None,
                   help="JSON file of flag defaults; explicit flags win")


def _add_train_flags(p):
    p.add_argument("--steps", type=int, default=800, help="optimizer steps")
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--lr-decay", type=float, default=0.5,
                   help="learning-rate multiplier applied every --decay-epochs")
    p.add_argument("--decay-epochs", type=int, default=20,
                   help="epochs between learning-rate decays")
    p.add_argument("--bag-prob", type=float, default=0.5,
                   help="per-head example inclusion probability")
    p.add_argument("--width", type=int, default=32,
                   help="LSTM/gating/anchor width")
    p.add_argument("--depth", type=int, default=3, help="gating stack depth")
    p.add_argument("--heads", type=int, default=1, help="ensemble size E")
    p.add_argument("--modes-per-head", type=int, default=6, help="modes L per head")
    p.add_argument("--modes", type=int, default=6, help="output modes M")
    p.add_argument("--decoder", default="raw_states",
                   choices=("raw_states", "raw_states_with_heading",
                            "control", "polynomial"))
    p.add_argument("--poly-degree", type=int, default=5)
    p.add_argument("--anchors", default="learned", choices=("learned", "static"))
    p.add_argument("--road-segments", type=int, default=32)
    p.add_argument("--replicate-encoder", action="store_true",
                   help="give each head its own encoder weights")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="motionmix",
        description="Desk-scale multimodal trajectory prediction pipeline.")
    subs = parser.add_subparsers(dest="command", required=True)
    by_name = {}

    p = subs.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--template", default="t_junction",
                   choices=("t_junction", "four_way", "lane_follow", "parking_lot"))
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--sigma", type=float, default=0.05, help="waypoint noise scale")
    p.add_argument("--mode-probs", default=None,
                   help='JSON maneuver probabilities, e.g. \'{"left":0.5,"right":0.5}\'')
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--history-steps", type=int, default=5)
    p.add_argument("--future-steps", type=int, default=40)
    p.add_argument("--dt", type=float, default=0.2)
    p.add_argument("--max-neighbors", type=int, default=4)
    _add_common(p)
    p.set_defaults(func=cmd_generate)
    by_name["generate"] = p

    p = subs.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", default=None,
                   help="loss curve path (default: <out>.loss.csv)")
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)
    by_name["train"] = p

    p = subs.add_parser("predict", help="run a checkpoint over a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--out", required=True, help="predictions JSON path")
    p.add_argument("--heads", type=int, default=None,
                   help="expected ensemble size E (checked against checkpoint)")
    p.add_argument("--modes-per-head", type=int, default=None,
                   help="expected L (checked against checkpoint)")
    p.add_argument("--jobs", type=int, default=1)
    _add_common(p)
    p.set_defaults(func=cmd_predict)
    by_name["predict"] = p

    p = subs.add_parser("aggregate", help="reduce per-head modes to M modes")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--modes", type=int, default=6, help="output mixture size M")
    p.add_argument("--tau", type=float, default=2.0, help="coverage radius, m")
    p.add_argument("--max-iters", type=int, default=25)
    p.add_argument("--jobs", type=int, default=1)
    _add_common(p)
    p.set_defaults(func=cmd_aggregate)
    by_name["aggregate"] = p

    p = subs.add_parser("eval", help="score predictions against groundtruth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="val", choices=("train", "val"))
    p.add_argument("--report", required=True, help="metrics JSON path")
    p.add_argument("--csv", default=None, help="per-example CSV path")
    p.add_argument("--k", type=int, default=6, help="top-k modes")
    p.add_argument("--t", type=float, default=None,
                   help="displacement-error time, s (default: horizon end)")
    p.add_argument("--d", type=float, default=2.0, help="miss threshold, m")
    p.add_argument("--map-tau", type=float, default=2.0,
                   help="mAP true-positive radius, m")
    _add_common(p)
    p.set_defaults(func=cmd_eval)
    by_name["eval"] = p

    p = subs.add_parser("ablate", help="train/evaluate a preset family of variants")
    p.add_argument("--preset", required=True, choices=ABLATE_PRESETS)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics table CSV")
    p.add_argument("--tau", type=float, default=2.0)
    p.add_argument("--d", type=float, default=2.0)
    p.add_argument("--jobs", type=int, default=1)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_ablate)
    by_name["ablate"] = p

    return parser, by_name


def _merge_config(sub, argv: list, ns) -> None:
    """Overlay --config values onto flags the user did not pass explicitly."""
    if not getattr(ns, "config", None):
        return
    try:
        with open(ns.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{ns.config}: invalid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ValidationError(f"{ns.config}: expected a JSON object")
    known = {a.dest for a in sub._actions if a.dest not in ("help", "func")}
    unknown = set(cfg) - known
    if unknown:
        raise ValidationError(f"{ns.config}: unknown keys {sorted(unknown)}")
    explicit = set()
    for tok in argv:
        if tok.startswith("--"):
            act = sub._option_string_actions.get(tok.split("=", 1)[0])
            if act is not None:
                explicit.add(act.dest)
    for key, val in cfg.items():
        if key not in explicit:
            setattr(ns, key, val)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, by_name = build_parser()
    try:
        ns = parser.parse_args(argv)
        _merge_config(by_name[ns.command], argv[1:], ns)
        return ns.func(ns)
    except ValidationError as e:  # includes ParseError
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
