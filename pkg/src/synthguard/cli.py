"""Config-driven pipeline: split, synth, filter, noise calibration and
application, assessment.

Each subcommand reads a JSON config and writes into an output directory::

    out/
      manifest.json          version, config hash, timings, inventory
      release/               publishable: synthetic.csv, noise_manifest.json,
                             utility_report.json
      private/               never publish: train/control splits, stage
                             outputs, filter/ECAP/privacy reports, plot data

Exit codes: 0 success, 1 invalid config or input, 2 runtime failure
(near-singular covariance, filter target not reached, calibration failure).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import zlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .cart import CartParams, CartSynthesizer
from .distfilter import (
    DistanceSpec,
    Metric,
    NearSingularError,
    TargetNotReachedError,
    filtered_synthesize,
)
from .ecap import (
    CalibrationError,
    EcapIndeterminateError,
    NoiseSpec,
    PopulationModel,
    apply_noise,
    calibrate_noise,
)
from .metrics import (
    EstimateQuery,
    GtcapConfig,
    compare_marginals,
    marginals_to_frame,
    mean_gtcap,
    pmse_ratio_matrix,
    replicate_estimates,
    standardized_pmse_ratio,
)
from .tabular import (
    DataValidationError,
    Dataset,
    Kind,
    Schema,
    SchemaError,
    _atomic_write_text,
    load_csv,
    load_schema,
    split_holdout,
    write_csv,
)

__all__ = ["main", "PipelineConfig", "ConfigError", "stage_seed", "release_safety_scan", "STAGES"]

PACKAGE_PREFIX = "package:"
STAGES = ("split", "synth", "filter", "noise-calibrate", "noise-apply", "assess")


class ConfigError(ValueError):
    pass


def stage_seed(seed: int, label: str) -> int:
    """Sub-seed for one stage; depends only on the global seed and the label."""
    return int(np.random.SeedSequence([int(seed), zlib.crc32(label.encode())]).generate_state(1)[0])


def _canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    _atomic_write_text(path, _canonical_json(obj))


def _resolve(path: str, base: Path):
    if path.startswith(PACKAGE_PREFIX):
        return Path(str(resources.files("synthguard") / "data" / path[len(PACKAGE_PREFIX):]))
    p = Path(path)
    return p if p.is_absolute() else base / p


# --- config -----------------------------------------------------------------------


_SECTION_KEYS = {
    "split": {"k"},
    "synth": {"order", "min_leaf", "min_split", "max_depth", "m"},
    "filter": {"variables", "exclude", "metric", "target", "max_rounds", "batch_size"},
    "noise": {"target_ecap", "exempt", "models", "replicates", "mc_samples", "use_recommended", "grid"},
    "assess": {"gtcap", "pmse", "estimates", "marginal_bins"},
}


@dataclass
class PipelineConfig:
    raw: dict
    base: Path
    schema: Schema | None

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    def section(self, name):
        return self.raw.get(name)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(_canonical_json(self.raw).encode()).hexdigest()

    def path(self, key):
        paths = self.raw.get("paths", {})
        if key not in paths:
            raise ConfigError(f"paths.{key} is required")
        return _resolve(paths[key], self.base)

    @classmethod
    def load(cls, path, seed=None, out=None) -> "PipelineConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        if seed is not None:
            raw["seed"] = seed
        if out is not None:
            raw.setdefault("paths", {})["output"] = str(Path(out).resolve())
        cfg = cls(raw, path.resolve().parent, None)
        cfg.validate()
        return cfg

    def validate(self):
        raw = self.raw
        if "seed" not in raw or not isinstance(raw["seed"], int) or isinstance(raw["seed"], bool):
            raise ConfigError("an integer 'seed' is required")
        for name, allowed in _SECTION_KEYS.items():
            sec = raw.get(name)
            if sec is None:
                continue
            if not isinstance(sec, dict):
                raise ConfigError(f"section '{name}' must be an object")
            unknown = set(sec) - allowed
            if unknown:
                raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
        if "schema" in raw.get("paths", {}):
            try:
                self.schema = load_schema(self.path("schema"))
            except FileNotFoundError:
                raise ConfigError(f"schema file not found: {self.path('schema')}") from None
        try:
            self._check_variables()
        except (SchemaError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def _check_variables(self):
        s = self.schema
        if s is None:
            if any(self.section(n) for n in ("split", "synth", "filter", "assess")):
                raise ConfigError("paths.schema is required")
            return
        if (sec := self.section("split")) is not None:
            if not isinstance(sec.get("k"), int) or sec["k"] < 1:
                raise ConfigError("split.k must be a positive integer")
        if (sec := self.section("synth")) is not None:
            if sec.get("order") is not None:
                s.check_names(sec["order"])
                if sorted(sec["order"]) != sorted(s.names):
                    raise ConfigError("synth.order must list every schema variable once")
            self.cart_params()
        if (sec := self.section("filter")) is not None:
            if "variables" in sec and "exclude" in sec:
                raise ConfigError("filter takes either 'variables' or 'exclude', not both")
            self.distance_spec().validate(s)
        if (sec := self.section("noise")) is not None:
            exempt = sec.get("exempt", [])
            models = sec.get("models", {})
            s.check_names([*exempt, *models])
            for name in models:
                if name in exempt:
                    raise ConfigError(f"{name} is both exempt and modelled")
                if s[name].kind is not Kind.QUANTITATIVE:
                    raise ConfigError(f"noise model for non-quantitative variable {name}")
                self.population(name)
            for v in s:
                if v.kind is Kind.QUANTITATIVE and v.name not in exempt and v.name not in models:
                    raise ConfigError(f"quantitative variable {v.name} needs a noise model or an exemption")
        if (sec := self.section("assess")) is not None:
            if "gtcap" in sec:
                self.gtcap_config().validate(s)
            for q in self.estimate_queries():
                q.validate(s)

    # section parsers

    def cart_params(self, seed=0) -> CartParams:
        sec = self.section("synth") or {}
        return CartParams(
            min_leaf=sec.get("min_leaf", 33),
            min_split=sec.get("min_split", 100),
            max_depth=sec.get("max_depth", 30),
            seed=seed,
        )

    def distance_spec(self) -> DistanceSpec:
        sec = self.section("filter") or {}
        if "variables" in sec:
            names = list(sec["variables"])
        else:
            self.schema.check_names(sec.get("exclude", []))
            drop = set(sec.get("exclude", []))
            names = [n for n in self.schema.names if n not in drop]
        return DistanceSpec(tuple(names), Metric(sec.get("metric", "mahalanobis")))

    def population(self, name) -> tuple:
        m = self.section("noise")["models"][name]
        try:
            model = PopulationModel.normal(int(m["N"]), float(m["mean"]), float(m["sd"]))
        except KeyError as exc:
            raise ConfigError(f"noise model for {name} lacks {exc}") from None
        values = m.get("values")
        return model, values, m.get("n")

    def gtcap_config(self) -> GtcapConfig:
        g = self.section("assess")["gtcap"]
        return GtcapConfig(tuple(g["keys"]), tuple(g["targets"]), g.get("radii", {}))

    def estimate_queries(self) -> list:
        sec = self.section("assess") or {}
        return [EstimateQuery(q["variable"], q["op"], q["value"], tuple(q["targets"])) for q in sec.get("estimates", [])]


# --- stage I/O --------------------------------------------------------------------


class Layout:
    def __init__(self, root: Path):
        self.root = Path(root)
        self.release = self.root / "release"
        self.private = self.root / "private"

    train = property(lambda self: self.private / "train.csv")
    control = property(lambda self: self.private / "control.csv")
    synth = property(lambda self: self.private / "stages" / "synthetic_unfiltered.csv")
    filtered = property(lambda self: self.private / "stages" / "synthetic_filtered.csv")
    noise_manifest = property(lambda self: self.release / "noise_manifest.json")
    synthetic = property(lambda self: self.release / "synthetic.csv")
    manifest = property(lambda self: self.root / "manifest.json")

    def make(self):
        for d in (self.release, self.private / "stages", self.private / "plots"):
            d.mkdir(parents=True, exist_ok=True)


def _read_csv(path: Path, schema):
    if not path.exists():
        raise ConfigError(f"input not found: {path} (run the earlier stage first)")
    return load_csv(path, schema)


def _original(cfg: PipelineConfig) -> Dataset:
    """Data the synthesizer learns from: the split's training part if a
    split is configured, else the input itself."""
    if cfg.section("split") is not None:
        return _read_csv(Layout(cfg.path("output")).train, cfg.schema)
    return _read_csv(cfg.path("input"), cfg.schema)


def _latest_synthetic(cfg: PipelineConfig, layout: Layout) -> Dataset:
    if cfg.section("filter") is not None:
        return _read_csv(layout.filtered, cfg.schema)
    return _read_csv(layout.synth, cfg.schema)


# --- stages -----------------------------------------------------------------------


def cmd_split(cfg: PipelineConfig, threads: int) -> dict:
    layout = Layout(cfg.path("output"))
    data = _read_csv(cfg.path("input"), cfg.schema)
    train, control = split_holdout(data, cfg.section("split")["k"], stage_seed(cfg.seed, "split"))
    write_csv(train, layout.train)
    write_csv(control, layout.control)
    return {"train_rows": train.n_rows, "control_rows": control.n_rows}


def cmd_synth(cfg: PipelineConfig, threads: int) -> dict:
    layout = Layout(cfg.path("output"))
    orig = _original(cfg)
    sec = cfg.section("synth") or {}
    seed = stage_seed(cfg.seed, "synth")
    p = cfg.cart_params(seed)
    model = CartSynthesizer(p.min_leaf, p.min_split, p.max_depth, sec.get("order"), seed).fit(orig)
    m = sec.get("m") or orig.n_rows
    write_csv(model.sample(m, random_state=seed), layout.synth)
    return {"rows": m, "leaves": {s.target: (t.n_leaves if t is not None else None) for s, t in zip(model.steps_, model.trees_)}}


def cmd_filter(cfg: PipelineConfig, threads: int) -> dict:
    layout = Layout(cfg.path("output"))
    orig = _original(cfg)
    first = _read_csv(layout.synth, cfg.schema)
    sec = cfg.section("filter")
    synth_sec = cfg.section("synth") or {}
    out, report = filtered_synthesize(
        orig,
        synth_sec.get("order"),
        cfg.cart_params(stage_seed(cfg.seed, "filter")),
        cfg.distance_spec(),
        sec.get("target") or first.n_rows,
        sec.get("max_rounds", 50),
        batch_size=sec.get("batch_size"),
        first_batch=first,
        threads=threads,
    )
    write_csv(out, layout.filtered)
    _write_json(layout.private / "filter_report.json", report.to_dict())
    return {"rows": out.n_rows, "rounds": len(report.rounds)}


def _noise_plan(cfg: PipelineConfig):
    sec = cfg.section("noise") or {}
    return sec, sorted(sec.get("models", {})), list(sec.get("exempt", []))


def _release_size(cfg, layout, orig) -> int:
    path = layout.filtered if cfg.section("filter") is not None else layout.synth
    if path.exists():
        return _read_csv(path, cfg.schema).n_rows
    return (cfg.section("synth") or {}).get("m") or orig.n_rows


def cmd_noise_calibrate(cfg: PipelineConfig, threads: int) -> dict:
    layout = Layout(cfg.path("output"))
    sec, names, exempt = _noise_plan(cfg)
    orig = None
    private, public, curves = {}, {}, []
    for name in names:
        model, values, n = cfg.population(name)
        if values is None or n is None:
            # attacked values come from the original data; n is the release size
            orig = _original(cfg) if orig is None else orig
            values = orig[name] if values is None else values
            n = _release_size(cfg, layout, orig) if n is None else n
        cal = calibrate_noise(
            values,
            model,
            int(n),
            sec.get("target_ecap", 0.2),
            sec.get("grid"),
            sec.get("replicates", 200),
            sec.get("mc_samples", 100_000),
            stage_seed(cfg.seed, f"noise.calibrate.{name}"),
            threads,
        )
        sigma = cal.recommended_sigma if sec.get("use_recommended", False) else cal.noise.sigma
        public[name] = NoiseSpec(sigma).to_dict()
        report = cal.to_private_dict()
        report["population"] = model.to_dict()
        report["n"] = int(n)
        private[name] = report
        for s, e in zip(cal.grid, cal.worst_curve):
            curves.append(f"{name},{s!r},{float(e)!r}")
    _write_json(layout.private / "ecap_report.json", {"publishable": False, "variables": private})
    _atomic_write_text(layout.private / "plots" / "ecap_curves.csv", "variable,sigma,max_ecap\n" + "".join(c + "\n" for c in curves))
    _write_json(layout.noise_manifest, {"noise": public, "exempt": exempt})
    return {"variables": {k: v["sigma"] for k, v in public.items()}}


def cmd_noise_apply(cfg: PipelineConfig, threads: int) -> dict:
    layout = Layout(cfg.path("output"))
    data = _latest_synthetic(cfg, layout)
    applied = {}
    if cfg.section("noise") is not None:
        if not layout.noise_manifest.exists():
            raise ConfigError("noise manifest missing (run noise-calibrate first)")
        manifest = json.loads(layout.noise_manifest.read_text())
        for name in sorted(manifest["noise"]):
            spec = NoiseSpec(float(manifest["noise"][name]["sigma"]), manifest["noise"][name]["law"])
            data = apply_noise(data, name, spec, stage_seed(cfg.seed, f"noise.apply.{name}"))
            applied[name] = spec.sigma
    write_csv(data, layout.synthetic)
    return {"rows": data.n_rows, "noised": applied}


def _finite(x):
    return None if x is None or (isinstance(x, float) and not np.isfinite(x)) else x


def cmd_assess(cfg: PipelineConfig, threads: int) -> dict:
    layout = Layout(cfg.path("output"))
    orig = _original(cfg)
    synth = _read_csv(layout.synthetic, cfg.schema)
    sec = cfg.section("assess") or {}
    seed = stage_seed(cfg.seed, "assess")
    summary = {}

    privacy = {"publishable": False}
    if "gtcap" in sec:
        rep = mean_gtcap(orig, synth, cfg.gtcap_config())
        privacy["gtcap"] = {k: _finite(v) for k, v in rep.to_dict().items()}
        rep.rows.to_csv(layout.private / "plots" / "gtcap_rows.csv", index=False)
        summary["mean_gtcap"] = privacy["gtcap"]["mean_gtcap"]
    _write_json(layout.private / "privacy_report.json", privacy)

    p = sec.get("pmse", {})
    params = CartParams(p.get("min_leaf", 10), p.get("min_split", 20), p.get("max_depth", 30))
    overall = standardized_pmse_ratio(orig, synth, None, params, p.get("permutations", 20), seed)
    pair_vars = p.get("pair_variables", orig.names)
    overall.pair_ratios = pmse_ratio_matrix(orig, synth, pair_vars, params, p.get("pair_permutations", 5), seed + 1)
    overall.pair_ratios.to_csv(layout.private / "plots" / "pmse_pair_ratios.csv")
    utility = {"pmse": {k: _finite(v) for k, v in overall.to_dict().items()}}
    estimates = []
    for q in cfg.estimate_queries():
        table = replicate_estimates(orig, {"synthetic": synth}, q)
        estimates.append(
            {
                "filter": {"variable": q.variable, "op": q.op, "value": q.value},
                "exact": {c: {t: _finite(float(table.loc[t, c])) for t in table.index} for c in table.columns},
                "display": {
                    c: {t: (None if np.isnan(table.loc[t, c]) else round(float(table.loc[t, c]), 2)) for t in table.index}
                    for c in table.columns
                },
            }
        )
    utility["estimates"] = estimates
    marg = compare_marginals(orig, synth, sec.get("marginal_bins", 20))
    marginals_to_frame(marg).to_csv(layout.private / "plots" / "marginals.csv", index=False)
    utility["ks"] = {n: _finite(t.attrs["ks"]) for n, t in marg.items() if "ks" in t.attrs}
    _write_json(layout.release / "utility_report.json", utility)
    summary["pmse"] = overall.pmse
    summary["standardized_ratio"] = _finite(overall.ratio)
    return summary


_COMMANDS = {
    "split": cmd_split,
    "synth": cmd_synth,
    "filter": cmd_filter,
    "noise-calibrate": cmd_noise_calibrate,
    "noise-apply": cmd_noise_apply,
    "assess": cmd_assess,
}


def _stage_enabled(cfg: PipelineConfig, stage: str) -> bool:
    if stage in ("synth", "noise-apply", "assess"):
        return True
    section = {"noise-calibrate": "noise"}.get(stage, stage)
    return cfg.section(section) is not None


def cmd_pipeline(cfg: PipelineConfig, threads: int) -> dict:
    results = {}
    for stage in STAGES:
        if _stage_enabled(cfg, stage):
            results[stage] = _run_stage(cfg, stage, threads)
    return results


# --- manifest and safety ----------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _update_manifest(cfg: PipelineConfig, stage: str, seconds: float):
    layout = Layout(cfg.path("output"))
    manifest = {}
    if layout.manifest.exists():
        manifest = json.loads(layout.manifest.read_text())
    manifest["version"] = __version__
    manifest["config_hash"] = cfg.config_hash
    manifest["seed"] = cfg.seed
    manifest.setdefault("timings", {})[stage] = round(seconds, 3)
    if layout.noise_manifest.exists():
        manifest["noise"] = json.loads(layout.noise_manifest.read_text())
    manifest["inventory"] = {
        str(p.relative_to(layout.root)): _sha256(p)
        for p in sorted(layout.root.rglob("*"))
        if p.is_file() and p != layout.manifest and not p.name.startswith(".")
    }
    _write_json(layout.manifest, manifest)


def _run_stage(cfg, stage, threads):
    Layout(cfg.path("output")).make()
    start = time.perf_counter()
    result = _COMMANDS[stage](cfg, threads)
    _update_manifest(cfg, stage, time.perf_counter() - start)
    return result


_FORBIDDEN_KEYS = ("ecap", "distance", "nearest", "threshold")


def release_safety_scan(release_dir, orig: Dataset) -> list:
    """Problems found in a release directory: original rows reproduced in
    ``synthetic.csv`` and JSON keys naming ECAP values or per-row distances."""
    release_dir = Path(release_dir)
    problems = []
    csv = release_dir / "synthetic.csv"
    if csv.exists():
        synth = load_csv(csv, orig.schema)
        seen = {tuple(np.nan_to_num(r, nan=np.inf)) for r in orig.matrix()}
        for i, r in enumerate(synth.matrix()):
            if tuple(np.nan_to_num(r, nan=np.inf)) in seen:
                problems.append(f"synthetic.csv row {i + 1} equals an original row")

    def walk(obj, where):
        if isinstance(obj, dict):
            for k, v in obj.items():
                if any(f in str(k).lower() for f in _FORBIDDEN_KEYS):
                    problems.append(f"{where}: key {k!r}")
                walk(v, f"{where}.{k}")
        elif isinstance(obj, list):
            for i, v in enumerate(obj):
                walk(v, f"{where}[{i}]")

    for path in sorted(release_dir.glob("*.json")):
        walk(json.loads(path.read_text()), path.name)
    return problems


# --- entry point ------------------------------------------------------------------


def _threads(arg) -> int:
    if arg is not None:
        return arg
    env = os.environ.get("SYNTHGUARD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"SYNTHGUARD_THREADS must be an integer, got {env!r}") from None
    return 1


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="synthguard", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*STAGES, "pipeline"):
        p = sub.add_parser(name, help=f"run the {name} stage" if name != "pipeline" else "run every configured stage")
        p.add_argument("--config", required=True, help="JSON pipeline config")
        p.add_argument("--out", help="output directory (overrides paths.output)")
        p.add_argument("--seed", type=int, help="global seed (overrides the config)")
        p.add_argument("--threads", type=_positive_int, help="worker threads (default: $SYNTHGUARD_THREADS or 1)")
    p = sub.add_parser("example-config", help="print the bundled fixture pipeline config")
    return parser


def example_config_text() -> str:
    return (resources.files("synthguard") / "data" / "pipeline_config.json").read_text(encoding="utf-8")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "example-config":
        sys.stdout.write(example_config_text())
        return 0
    try:
        threads = _threads(args.threads)
        cfg = PipelineConfig.load(args.config, seed=args.seed, out=args.out)
        cfg.path("output")
        if args.command == "pipeline":
            result = cmd_pipeline(cfg, threads)
        else:
            result = _run_stage(cfg, args.command, threads)
    except (NearSingularError, TargetNotReachedError, CalibrationError, EcapIndeterminateError) as exc:
        print(f"synthguard: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, SchemaError, DataValidationError, KeyError, ValueError) as exc:
        print(f"synthguard: invalid input: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, ArithmeticError, OSError) as exc:
        print(f"synthguard: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
