"""Command-line harness: gen, train, eval, run.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 an eval
threshold gate failed.
"""
from __future__ import annotations

import argparse
import os
import sys
from typing import Optional

import numpy as np

from . import bus
from .authenticator import AuthBank, AuthError, load_auth_model, save_auth_model, train_auth
from .config import ConfigError, resolve_config
from .detector import (
    DetectorError,
    is_bus_compromised,
    load_detector,
    reconstruction_errors,
    save_detector,
    train_detector,
)
from .features import ChannelMode, FeatureConfig, FeatureError, feature_matrix
from .frames import CanError
from .localizer import (
    AugmentationConfig,
    LocalizerError,
    eval_majority_trials,
    flatten_augmented,
    generate_signals,
    load_localizer,
    save_localizer,
    train_localizer,
)
from .metrics import MetricsReport, accuracy_report, auth_rates, confusion_report
from .monitoring import EcuRoster, Pipeline, RosterEntry
from .nn import NnError, TrainConfig
from .rng import derive_seed, substream
from .tracefile import TraceFileError, read_traces, write_traces

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_THRESHOLD = 3

TASK_CHANNELS = {
    "detector": ChannelMode.CAN_H,
    "localizer": ChannelMode.CAN_L,
    "auth": ChannelMode.DIFFERENTIAL,
}

TASK_RATES = {
    "detector": bus.DETECTION_SAMPLE_RATE,
    "localizer": bus.LOCALIZATION_SAMPLE_RATE,
    "auth": bus.AUTHENTICATION_SAMPLE_RATE,
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _channel(name: str, default: ChannelMode) -> ChannelMode:
    if not name:
        return default
    try:
        return ChannelMode(name.upper())
    except ValueError:
        raise CliError(f"unknown channel {name!r}", EXIT_USAGE) from None


def _load_all_traces(paths) -> list:
    traces = []
    for p in paths:
        traces.extend(read_traces(p))
    if not traces:
        raise CliError("no traces found in the given files", EXIT_DATA)
    return traces


def _train_config(base: TrainConfig, cfg: dict, seed: int) -> TrainConfig:
    overrides: dict = {"seed": seed}
    if cfg["lr"] > 0:
        overrides["learning_rate"] = cfg["lr"]
    if cfg["epochs"] > 0:
        overrides["max_epochs"] = cfg["epochs"]
    overrides["batch_size"] = cfg["batch_size"]
    overrides["patience"] = cfg["patience"]
    return TrainConfig(**{**base.__dict__, **overrides})


def _write_report(report: MetricsReport, out: Optional[str]):
    print(report.format_table())
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    cfg = resolve_config(
        args.config,
        {
            "seed": args.seed,
            "network": args.network,
            "frames": args.frames,
            "sample_rate": args.sample_rate,
            "bit_time": args.bit_time,
            "noise_sigma": args.noise_sigma,
            "dlc": args.dlc,
            "attacker": args.attacker,
            "attacker_active": args.attacker_active or None,
            "spoof_target": args.spoof_target,
        },
    )
    attacker = bus.attacker_device(cfg["attacker"])
    topology = bus.build_network(cfg["network"], attacker)
    rng = substream(cfg["seed"], "schedule")
    transmitters = None
    if cfg["attacker_active"]:
        transmitters = [t.point for t in topology.occupied()]
    schedule = bus.round_robin_schedule(
        topology,
        cfg["frames"],
        rng,
        dlc=cfg["dlc"],
        transmitters=transmitters,
        spoof_target=cfg["spoof_target"] or None,
    )
    traces = bus.generate_dataset(
        topology,
        schedule,
        cfg["sample_rate"],
        cfg["seed"],
        noise_sigma=cfg["noise_sigma"],
        bit_time=cfg["bit_time"],
    )
    write_traces(args.out, traces)
    print(f"wrote {len(traces)} traces ({topology.name}) to {args.out}", file=sys.stderr)
    return EXIT_OK


def _default_roster() -> EcuRoster:
    entries = []
    for device, point in zip(bus.default_legit_devices(), bus.LEGIT_POINTS):
        entries.append(
            RosterEntry(ecu=device.name, tap=point, ids=(bus.DEFAULT_ID_TABLE[device.name],))
        )
    return EcuRoster(entries=tuple(entries))


def _load_roster(path: Optional[str]) -> EcuRoster:
    if not path:
        return _default_roster()
    with open(path, "r", encoding="utf-8") as fh:
        return EcuRoster.from_json(fh.read())


def cmd_train(args) -> int:
    cfg = resolve_config(
        args.config,
        {
            "seed": args.seed,
            "channel": args.channel,
            "k": getattr(args, "k", None),
            "r": getattr(args, "r", None),
            "width": getattr(args, "width", None),
            "sigma_scale": getattr(args, "sigma_scale", None),
            "lr": args.lr,
            "epochs": args.epochs,
            "batch_size": args.batch_size,
            "patience": args.patience,
        },
    )
    seed = cfg["seed"]
    mode = _channel(cfg["channel"], TASK_CHANNELS[args.task])
    fcfg = FeatureConfig()
    traces = _load_all_traces(args.data)

    if args.task == "detector":
        from .detector import DEFAULT_DETECTOR_TRAIN

        x, _ = feature_matrix(traces, mode, fcfg, skip_bad=True)
        n_val = max(1, int(round(0.30 * len(x))))
        model = train_detector(
            x[:-n_val],
            x[-n_val:],
            cfg=_train_config(DEFAULT_DETECTOR_TRAIN, cfg, seed),
            channel=mode,
            seed=seed,
        )
        save_detector(args.out, model)
        print(f"threshold: {model.thr:.8f}")
        print(f"saved detector to {args.out}", file=sys.stderr)
        return EXIT_OK

    if args.task == "localizer":
        from .localizer import DEFAULT_LOCALIZER_TRAIN, INSERTION_POINTS

        per_ecu: dict[str, dict[str, list[np.ndarray]]] = {}
        for t in traces:
            if t.is_attacker:
                continue
            point = bus.insertion_point_of(t.config_tag)
            if point is None:
                raise CliError(
                    f"trace tagged {t.config_tag!r} is not an insertion config",
                    EXIT_DATA,
                )
            try:
                vec = feature_matrix([t], mode, fcfg)[0][0]
            except FeatureError:
                continue
            per_ecu.setdefault(t.source_label, {}).setdefault(point, []).append(vec)
        xs, labels = [], []
        for i, ecu in enumerate(sorted(per_ecu)):
            aug = generate_signals(
                per_ecu[ecu],
                AugmentationConfig(
                    points=INSERTION_POINTS,
                    k=cfg["k"],
                    r=cfg["r"],
                    sigma_scale=cfg["sigma_scale"],
                    seed=derive_seed(seed, f"augment/{ecu}"),
                ),
            )
            x_e, y_e = flatten_augmented(aug, INSERTION_POINTS)
            xs.append(x_e)
            labels.extend(y_e)
        model = train_localizer(
            np.concatenate(xs),
            labels,
            classes=INSERTION_POINTS,
            cfg=_train_config(DEFAULT_LOCALIZER_TRAIN, cfg, seed),
            width=cfg["width"],
            channel=mode,
            seed=seed,
        )
        save_localizer(args.out, model)
        print(f"saved localizer to {args.out}", file=sys.stderr)
        return EXIT_OK

    # auth: one binary classifier per roster member
    from .authenticator import DEFAULT_AUTH_TRAIN, interleave_blocks

    roster = _load_roster(args.roster)
    # Interleave per-file recording sessions so the chronological validation
    # split covers every captured topology.
    blocks = []
    for path in args.data:
        x_f, vecs_f = feature_matrix(read_traces(path), mode, fcfg, skip_bad=True)
        blocks.append((x_f, [v.ground_truth for v in vecs_f]))
    x, origin_list = interleave_blocks(blocks)
    origins = np.array(origin_list)
    os.makedirs(args.out, exist_ok=True)
    for ecu in roster.labels():
        y = (origins == ecu).astype(np.float64)
        model = train_auth(
            ecu,
            x,
            y,
            cfg=_train_config(DEFAULT_AUTH_TRAIN, cfg, seed),
            channel=mode,
            seed=derive_seed(seed, f"auth/{ecu}"),
        )
        path = os.path.join(args.out, f"auth_{ecu}.model")
        save_auth_model(path, model)
        print(f"trained {ecu} (val loss {model.history.best_val_loss:.6f})", file=sys.stderr)
    with open(os.path.join(args.out, "roster.json"), "w", encoding="utf-8") as fh:
        fh.write(roster.to_json() + "\n")
    print(f"saved {len(roster.labels())} models to {args.out}", file=sys.stderr)
    return EXIT_OK


def _load_bank(models_dir: str, roster: EcuRoster) -> AuthBank:
    models = {}
    for ecu in roster.labels():
        path = os.path.join(models_dir, f"auth_{ecu}.model")
        if not os.path.exists(path):
            raise CliError(f"missing model file {path}", EXIT_DATA)
        models[ecu] = load_auth_model(path)
    return AuthBank(models, roster.id_table())


def cmd_eval(args) -> int:
    fcfg = FeatureConfig()
    if args.task == "detector":
        model = load_detector(args.model)
        lines, truths, preds = [], [], []
        for path, expected in [(p, "clean") for p in args.clean] + [
            (p, "dirty") for p in args.dirty
        ]:
            for t in read_traces(path):
                try:
                    vec = feature_matrix([t], model.channel, fcfg)[0][0]
                except FeatureError:
                    continue
                truths.append(expected)
                preds.append("dirty" if is_bus_compromised(vec, model) else "clean")
        report = confusion_report(truths, preds, ("clean", "dirty"))
        _write_report(report, args.out)
        if args.min_accuracy is not None and report.overall_accuracy < args.min_accuracy:
            return EXIT_THRESHOLD
        return EXIT_OK

    if args.task == "localizer":
        model = load_localizer(args.model)
        traces = _load_all_traces(args.data)
        truths, preds = eval_majority_trials(
            traces, model, fcfg, rng=substream(args.seed or 0, "tiebreak")
        )
        if not truths:
            raise CliError("no complete voting groups in the data", EXIT_DATA)
        report = confusion_report(truths, preds, model.classes)
        _write_report(report, args.out)
        if args.min_accuracy is not None and report.overall_accuracy < args.min_accuracy:
            return EXIT_THRESHOLD
        return EXIT_OK

    # auth
    roster = _load_roster(args.roster)
    bank = _load_bank(args.models, roster)
    traces = _load_all_traces(args.data)
    mode = next(iter(bank.models.values())).channel
    x, vecs = feature_matrix(traces, mode, fcfg, skip_bad=True)
    origins = [v.ground_truth for v in vecs]
    scores = {
        ecu: [bank.models[ecu].score(row) for row in x] for ecu in roster.labels()
    }
    report = auth_rates(scores, origins)
    _write_report(report, args.out)
    if args.max_frr is not None or args.max_far is not None:
        for rates in report.per_ecu.values():
            if args.max_frr is not None and rates.frr > args.max_frr:
                return EXIT_THRESHOLD
            if args.max_far is not None and rates.far > args.max_far:
                return EXIT_THRESHOLD
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = resolve_config(
        args.config,
        {"seed": args.seed, "tp": args.tp, "frame_gap": args.frame_gap},
    )
    roster = _load_roster(args.roster)
    detector = load_detector(args.detector)
    localizer = load_localizer(args.localizer) if args.localizer else None
    bank = _load_bank(args.auth, roster)
    pipeline = Pipeline(
        detector=detector,
        localizer=localizer,
        bank=bank,
        roster=roster,
        tp=cfg["tp"],
        frame_gap=cfg["frame_gap"],
        startup_votes=args.startup_votes,
        seed=cfg["seed"],
    )
    traces = _load_all_traces(args.data)
    count = 0
    for alert in pipeline.run(traces):
        print(alert.to_json())
        count += 1
    print(f"{count} alerts from {len(traces)} frames", file=sys.stderr)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="canloc",
        description="Simulated CAN bus voltage fingerprinting: generate traces, "
        "train and evaluate the detection/localization/authentication models, "
        "and run the monitoring pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="synthesize a trace file")
    gen.add_argument("--out", required=True)
    gen.add_argument("--network", default=None, help="Nw0..Nw8")
    gen.add_argument("--frames", type=int, default=None)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--sample-rate", type=float, default=None, dest="sample_rate")
    gen.add_argument("--bit-time", type=float, default=None, dest="bit_time")
    gen.add_argument("--noise-sigma", type=float, default=None, dest="noise_sigma")
    gen.add_argument("--dlc", type=int, default=None)
    gen.add_argument("--attacker", choices=["A1", "A2"], default=None)
    gen.add_argument("--attacker-active", action="store_true", dest="attacker_active")
    gen.add_argument("--spoof-target", default=None, dest="spoof_target")
    gen.add_argument("--config", default=None)
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train a model from trace files")
    tr.add_argument("task", choices=["detector", "localizer", "auth"])
    tr.add_argument("--data", nargs="+", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--channel", default=None)
    tr.add_argument("--k", type=int, default=None)
    tr.add_argument("--r", type=int, default=None)
    tr.add_argument("--sigma-scale", type=float, default=None, dest="sigma_scale")
    tr.add_argument("--width", type=float, default=None)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    tr.add_argument("--patience", type=int, default=None)
    tr.add_argument("--roster", default=None)
    tr.add_argument("--config", default=None)
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate models against labeled traces")
    ev.add_argument("task", choices=["detector", "localizer", "auth"])
    ev.add_argument("--model", default=None, help="detector/localizer model file")
    ev.add_argument("--models", default=None, help="auth model directory")
    ev.add_argument("--data", nargs="*", default=[])
    ev.add_argument("--clean", nargs="*", default=[])
    ev.add_argument("--dirty", nargs="*", default=[])
    ev.add_argument("--roster", default=None)
    ev.add_argument("--out", default=None)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--min-accuracy", type=float, default=None, dest="min_accuracy")
    ev.add_argument("--max-frr", type=float, default=None, dest="max_frr")
    ev.add_argument("--max-far", type=float, default=None, dest="max_far")
    ev.set_defaults(func=cmd_eval)

    run = sub.add_parser("run", help="start-up detection plus continuous loop")
    run.add_argument("--detector", required=True)
    run.add_argument("--localizer", default=None)
    run.add_argument("--auth", required=True, help="auth model directory")
    run.add_argument("--roster", default=None)
    run.add_argument("--data", nargs="+", required=True)
    run.add_argument("--tp", type=float, default=None)
    run.add_argument("--frame-gap", type=float, default=None, dest="frame_gap")
    run.add_argument("--startup-votes", type=int, default=1, dest="startup_votes")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--config", default=None)
    run.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, bus.BusError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        TraceFileError,
        FeatureError,
        CanError,
        DetectorError,
        LocalizerError,
        AuthError,
        NnError,
        OSError,
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
