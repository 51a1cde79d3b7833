"""Command-line entry point: ``errornav <subcommand> [flags]``.

Subcommands: ``mapgen``, ``collect``, ``train``, ``campaign``, ``eval`` and
``plot``.  Settings come from built-in defaults, then an optional TOML file
(``--config``), then ``--set table.key=value`` and ``--seed`` flags, each
layer overriding the previous one.  The file's top-level keys and tables
mirror :class:`errornav.pipeline.CampaignConfig` (``[map]``, ``[train]``,
``[mppi]``, ``[nav.observation]`` and so on); an extra ``[course]`` table
configures evaluation.

Every run writes ``manifest.json`` into ``--out-dir``.  Exit codes: 0 on
success, 1 for configuration errors, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import plotting, tensorio
from .controller import NetworkPredictor
from .labeling import Dataset, EpisodeLog, label_logs
from .network import init_params
from .pipeline import (CampaignConfig, CourseSpec, bootstrap_collect, course_length,
                       evaluate_waypoints, run_campaign)
from .terrain import TerrainMap
from .training import load_checkpoint, save_checkpoint, train

log = logging.getLogger("errornav")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


# ---------------------------------------------------------------- config

def _coerce(default, value, path):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if isinstance(value, dict):  # e.g. map.densities = {Shrub = 0.1}
            return tuple(sorted(value.items()))
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected an array, got {value!r}")
        return _tuplify(value)
    return value


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, (list, tuple)) else v


def build_dataclass(cls, data: dict, path: str = ""):
    """Instantiate ``cls`` from nested dicts, reporting bad keys by dotted path."""
    if not isinstance(data, dict):
        raise ConfigError(path, "expected a table")
    base = cls()
    kwargs = {}
    names = {f.name for f in dataclasses.fields(cls)}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(sub, "unknown setting")
        current = getattr(base, key)
        if dataclasses.is_dataclass(current):
            kwargs[key] = build_dataclass(type(current), value, sub)
        else:
            kwargs[key] = _coerce(current, value, sub)
    try:
        return dataclasses.replace(base, **kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(path or "<root>", str(exc)) from None


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def _set_path(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(dotted, "cannot set a key below a non-table value")
    node[keys[-1]] = value


def load_config(path=None, overrides=(), seed=None) -> tuple[CampaignConfig, CourseSpec]:
    tree = {}
    if path is not None:
        try:
            tree = tomllib.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("--config", f"file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError("--config", f"invalid TOML: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError("--set", f"expected key=value, got {item!r}")
        key, text = item.split("=", 1)
        _set_path(tree, key.strip(), _parse_value(text.strip()))
    if seed is not None:
        tree["seed"] = seed
    course = build_dataclass(CourseSpec, tree.pop("course", {}), "course")
    return build_dataclass(CampaignConfig, tree), course


# ---------------------------------------------------------------- manifest

def _blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(inputs: dict) -> str:
    """Git-style tree hash over named input blobs."""
    lines = "".join(f"{name} {_blob_hash(data)}\n" for name, data in sorted(inputs.items()))
    return hashlib.sha1(lines.encode()).hexdigest()


@dataclasses.dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int
    artifacts: list
    wall_clock_s: float
    input_hash: str

    def write(self, out_dir: Path) -> Path:
        if len(set(self.artifacts)) != len(self.artifacts):
            raise RuntimeError("artifact listed twice in manifest")
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True))
        return path


def _config_dict(cfg, course):
    return {"campaign": dataclasses.asdict(cfg), "course": dataclasses.asdict(course)}


def _snapshot(out_dir: Path) -> dict:
    return {str(p.relative_to(out_dir)): p.stat().st_mtime_ns for p in out_dir.rglob("*")
            if p.is_file() and p.name != "manifest.json"}


def _artifacts(before: dict, after: dict) -> list:
    """Files created or rewritten by this run."""
    return sorted(k for k, t in after.items() if before.get(k) != t)


def _inputs(args, cfg_dict) -> dict:
    blobs = {"config": json.dumps(cfg_dict, sort_keys=True).encode()}
    for name in ("map", "checkpoint"):
        p = getattr(args, name, None)
        if p:
            if not Path(p).is_file():
                raise FileNotFoundError(f"--{name} file not found: {p}")
            blobs[name] = Path(p).read_bytes()
    for p in getattr(args, "log", None) or []:
        blobs[f"log:{p}"] = Path(p).read_bytes()
    if getattr(args, "dataset", None):
        blobs["dataset"] = (Path(args.dataset) / "manifest.jsonl").read_bytes()
    return blobs


def _load_map(args, cfg: CampaignConfig) -> TerrainMap:
    return TerrainMap.load(args.map) if args.map else cfg.map.build()


# ---------------------------------------------------------------- subcommands

def cmd_mapgen(args, cfg, course, out: Path) -> None:
    spec = cfg.map
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    for name in ("width", "height", "resolution", "blob_size"):
        if getattr(args, name) is not None:
            changes[name] = getattr(args, name)
    if args.density:
        dens = dict(spec.densities) if not args.replace_densities else {}
        for item in args.density:
            tag, _, frac = item.partition("=")
            try:
                dens[tag] = float(frac)
            except ValueError:
                raise ConfigError("--density", f"expected TAG=FRACTION, got {item!r}") from None
        changes["densities"] = tuple(sorted(dens.items()))
    spec = dataclasses.replace(spec, **changes)
    try:
        tmap = spec.build()
    except ValueError as exc:
        raise ConfigError("map.densities", str(exc)) from None
    tmap.save(out / "map.json")
    log.info("map %dx%d cells, fractions %s", tmap.width, tmap.height,
             {c.tag: round(tmap.fraction(c.tag), 4) for c in tmap.classes})


def cmd_collect(args, cfg, course, out: Path) -> None:
    tmap = _load_map(args, cfg)
    logs = bootstrap_collect(tmap, cfg)
    (out / "logs").mkdir(exist_ok=True)
    for lg in logs:
        lg.save(out / "logs" / f"{lg.episode_id}.npz")
    ds = label_logs(logs, cfg.label)
    ds.save(out / "dataset")
    log.info("%d episodes, %d labeled samples", len(logs), ds.N)


def cmd_train(args, cfg, course, out: Path) -> None:
    if not args.dataset:
        raise ConfigError("--dataset", "a labeled dataset directory is required")
    ds = Dataset.load(args.dataset)
    if args.checkpoint:
        params, arch, _ = load_checkpoint(args.checkpoint)
        if arch != cfg.arch:
            raise ConfigError("arch", "checkpoint architecture differs from the configuration")
    else:
        params = init_params(cfg.arch, cfg.seed)
    res = train(params, ds, dataclasses.replace(cfg.train, seed=cfg.seed), cfg.arch)
    save_checkpoint(out / "checkpoint", res.params, cfg.arch,
                    {"best_epoch": res.best_epoch, "best_val_loss": res.best_val_loss})
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss"])
        w.writerow([0, "", repr(res.init_val_loss)])
        for i, (a, b) in enumerate(zip(res.train_losses, res.val_losses), 1):
            w.writerow([i, repr(a), repr(b)])
    log.info("best epoch %d, val loss %.5f", res.best_epoch, res.best_val_loss)


def cmd_campaign(args, cfg, course, out: Path) -> None:
    tmap = _load_map(args, cfg)
    result = run_campaign(cfg, out_dir=out, tmap=tmap)
    tmap.save(out / "map.json")
    reports = [dataclasses.asdict(r) for r in result.reports]
    (out / "reports.json").write_text(json.dumps(reports, indent=2, sort_keys=True))
    for r in result.reports:
        log.info("round %d: reached %d/%d, collisions %d", r.round, r.goals_reached,
                 r.goals_attempted, r.collisions)


def cmd_eval(args, cfg, course, out: Path) -> None:
    if not args.checkpoint:
        raise ConfigError("--checkpoint", "eval needs a trained checkpoint")
    params, arch, _ = load_checkpoint(args.checkpoint)
    tmap = _load_map(args, cfg)
    start, waypoints = course.resolve(tmap)
    nav = dataclasses.replace(cfg.nav, keep_samples=args.diag_every > 0)
    res = evaluate_waypoints(NetworkPredictor(params, arch), tmap, start, waypoints, cfg.reward,
                             dataclasses.replace(cfg.mppi, seed=cfg.seed), nav, course.timeout_s)
    (out / "logs").mkdir(exist_ok=True)
    for lg in res.logs:
        lg.save(out / "logs" / f"{lg.episode_id}.npz")
    np.savetxt(out / "trajectory.csv", res.trajectory, delimiter=",", header="x,y,heading",
               comments="", fmt="%.9g")
    summary = {"success": res.success, "start": list(start),
               "waypoints": [list(w) for w in waypoints],
               "course_length_m": course_length(start, waypoints),
               "legs": [o.value if o is not None else None for o in res.legs]}
    (out / "result.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    if args.diag_every > 0:
        rec = {k: [] for k in ("leg", "step", "observation", "samples", "plan", "rewards", "weights")}
        for i, (lg, nr) in enumerate(zip(res.logs, res.results)):
            for k in range(0, len(nr.diagnostics), args.diag_every):
                d = nr.diagnostics[k]
                for key, val in (("leg", i), ("step", k), ("observation", lg.observations[k]),
                                 ("samples", d.samples), ("plan", d.plan),
                                 ("rewards", d.rewards), ("weights", d.weights)):
                    rec[key].append(val)
        if rec["step"]:
            tensorio.save_npz(out / "diagnostics.npz", **{k: np.stack(v) for k, v in rec.items()})
    log.info("course %.1f m: %s", summary["course_length_m"],
             "success" if res.success else f"failed, legs {summary['legs']}")


def cmd_plot(args, cfg, course, out: Path) -> None:
    if not args.log and not args.diagnostics:
        raise ConfigError("--log", "give at least one --log or --diagnostics file")
    if args.log:
        tmap = _load_map(args, cfg)
        logs = [EpisodeLog.load(p) for p in args.log]
        path = np.concatenate([logs[0].states[:1, :2]] + [lg.states[1:, :2] for lg in logs])
        goals = [lg.goal for lg in logs if np.all(np.isfinite(lg.goal))]
        waypoints = goals[:-1] if len(goals) > 1 else []
        svg = plotting.overhead_svg(tmap, path, waypoints if len(logs) > 1 else [],
                                    goals[-1] if goals else None)
        (out / "overhead.svg").write_text(svg)
    if args.diagnostics:
        with np.load(args.diagnostics) as z:
            for j in range(len(z["step"])):
                svg = plotting.overlay_svg(z["observation"][j], z["samples"][j], z["plan"][j],
                                           cfg.dt, cfg.nav.observation)
                (out / f"overlay_leg{int(z['leg'][j])}_step{int(z['step'][j]):04d}.svg").write_text(svg)


COMMANDS = {"mapgen": cmd_mapgen, "collect": cmd_collect, "train": cmd_train,
            "campaign": cmd_campaign, "eval": cmd_eval, "plot": cmd_plot}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="errornav", description="Model-error prediction navigation toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {"mapgen": "generate a procedural terrain map",
             "collect": "scripted bootstrap collection and labeling",
             "train": "train the regressor on a labeled dataset",
             "campaign": "bootstrap plus on-policy collect/retrain rounds",
             "eval": "drive the waypoint course with a frozen checkpoint",
             "plot": "SVG overhead plots and sample overlays"}
    for name, text in helps.items():
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help="TOML settings file")
        s.add_argument("--seed", type=int, help="run seed (map seed for mapgen)")
        s.add_argument("--out-dir", default=".", help="directory for artifacts")
        s.add_argument("--map", help="terrain map JSON; default: generate from [map]")
        s.add_argument("--checkpoint", help="model checkpoint")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a setting, e.g. train.learning_rate=5e-4")
        s.add_argument("-v", "--verbose", action="store_true")
        if name == "mapgen":
            s.add_argument("--width", type=int)
            s.add_argument("--height", type=int)
            s.add_argument("--resolution", type=float)
            s.add_argument("--blob-size", type=float)
            s.add_argument("--density", action="append", metavar="TAG=FRACTION",
                           help="class density, repeatable")
            s.add_argument("--replace-densities", action="store_true",
                           help="drop configured densities not given with --density")
        if name == "train":
            s.add_argument("--dataset", help="labeled dataset directory")
        if name == "eval":
            s.add_argument("--diag-every", type=int, default=50,
                           help="save controller samples every N steps (0 disables)")
        if name == "plot":
            s.add_argument("--log", action="append", help="episode log (.npz), repeatable")
            s.add_argument("--diagnostics", help="diagnostics.npz written by eval")
    return p


def main(argv=None) -> int:
    t0 = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        mapgen = args.command == "mapgen"
        cfg, course = load_config(args.config, args.set, None if mapgen else args.seed)
        run_seed = cfg.seed
        if mapgen:
            run_seed = cfg.map.seed if args.seed is None else args.seed
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cfg_dict = _config_dict(cfg, course)
        inputs = _inputs(args, cfg_dict)
        before = _snapshot(out)
        COMMANDS[args.command](args, cfg, course, out)
        RunManifest(args.command, cfg_dict, run_seed, _artifacts(before, _snapshot(out)),
                    time.perf_counter() - t0, content_hash(inputs)).write(out)
    except ConfigError as exc:
        print(f"errornav: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"errornav: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
