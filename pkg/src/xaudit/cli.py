"""``xaudit`` command line.

Every subcommand writes its artifacts plus a ``manifest-<command>.json``
describing how they were made. Output goes to ``--out-dir`` (default: the
``XAUDIT_OUT_DIR`` environment variable, else ``xaudit-out``). All randomness
derives from the single ``--seed``.

Exit codes: 0 success, 1 invalid arguments or inputs, 2 failure while running.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, load_csv, load_schema, split, write_csv, make_two_group_toy
from .datasets import BUNDLED, load_bundled
from .errors import DataError, SchemaError, XAuditError
from .models import TrainConfig, model_from_json, model_to_json, train

log = logging.getLogger("xaudit")

OUT_ENV = "XAUDIT_OUT_DIR"
MANIFEST_VERSION = 1


class UsageError(Exception):
    """Bad arguments or unusable input files; exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Run:
    """Collects outputs of one command and writes its manifest last."""

    def __init__(self, args, command: str):
        self.args = args
        self.command = command
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.outputs: dict[str, str] = {}
        self.datasets: dict[str, str] = {}

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write(self, name: str, text: str, path: Path | None = None) -> Path:
        p = path or self.path(name)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text, encoding="utf-8")
        self.outputs[str(p)] = ""
        return p

    def note_dataset(self, label: str, ds: Dataset):
        self.datasets[label] = ds.fingerprint()

    def finish(self, manifest_path: Path | None = None) -> Path:
        import numba
        import scipy
        import sklearn

        config = {k: v for k, v in sorted(vars(self.args).items()) if k != "func"}
        manifest = {
            "manifest_version": MANIFEST_VERSION,
            "command": self.command,
            "config": config,
            "seed": self.args.seed,
            "datasets": self.datasets,
            "versions": {
                "xaudit": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                "scikit-learn": sklearn.__version__, "numba": numba.__version__,
            },
            "outputs": {p: _sha256(Path(p)) for p in sorted(self.outputs)},
        }
        mp = manifest_path or self.path(f"manifest-{self.command}.json")
        mp.write_text(_dump(manifest), encoding="utf-8")
        return mp


def _load_data(args) -> Dataset:
    spec = args.data
    if spec.startswith("builtin:"):
        name = spec.split(":", 1)[1]
        if name not in BUNDLED:
            raise UsageError(f"--data: unknown bundled dataset {name!r}; choose from {', '.join(sorted(BUNDLED))}")
        return load_bundled(name, seed=args.data_seed)
    path = Path(spec)
    if not path.is_file():
        raise UsageError(f"--data: file not found: {spec}")
    if not args.schema:
        raise UsageError("--schema is required with a CSV --data file")
    schema_path = Path(args.schema)
    if not schema_path.is_file():
        raise UsageError(f"--schema: file not found: {args.schema}")
    try:
        schema = load_schema(schema_path)
        return load_csv(path, schema, args.label, args.group)
    except (SchemaError, DataError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"--data/--schema: {exc}") from exc


def _split(args, ds: Dataset):
    return split(ds, args.test_fraction, args.seed)


def _load_model(path_str: str, schema=None, flag="--model"):
    path = Path(path_str)
    if not path.is_file():
        raise UsageError(f"{flag}: file not found: {path_str}")
    try:
        return model_from_json(json.loads(path.read_text(encoding="utf-8")), schema)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"{flag}: {path_str}: {exc}") from exc


def _check_dims(f, ds: Dataset, flag="--model"):
    if f.d != ds.d:
        raise UsageError(f"{flag}: model expects {f.d} features but the data has {ds.d}")


def _rows(spec: str, n: int) -> list[int]:
    try:
        rows = [int(v) for v in spec.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--rows: not a comma-separated list of integers: {spec!r}") from None
    for r in rows:
        if not 0 <= r < n:
            raise UsageError(f"--rows: row {r} outside the test set (n={n})")
    return rows


def _explainer_configs(names: str, args):
    from .explain import parse_method

    out = []
    for name in names.split(","):
        try:
            out.append(parse_method(
                name, seed=args.seed, n_perturbations=args.n_perturbations,
                bandwidth=args.bandwidth, cf_budget=args.cf_budget,
            ))
        except (ValueError, TypeError) as exc:
            raise UsageError(f"--method: {exc}") from exc
    return out


def _safe(label: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in label)


# ---------------------------------------------------------------- subcommands


def cmd_toy(args) -> int:
    run = Run(args, "toy")
    ds = make_two_group_toy(args.n_per_group, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out)
    run.outputs[str(out)] = ""
    schema_path = out.with_suffix(".schema.json")
    run.write("", _dump(ds.schema.to_json()), schema_path)
    run.note_dataset("toy", ds)
    run.finish()
    print(f"wrote {out} ({ds.n} rows)")
    return 0


def cmd_train(args) -> int:
    run = Run(args, "train")
    ds = _load_data(args)
    run.note_dataset("data", ds)
    tr, te = _split(args, ds)
    cfg = TrainConfig(args.model, seed=args.seed)
    f = train(tr, cfg, test=te)
    out = Path(args.out) if args.out else run.path(f"model-{args.model}.json")
    run.write("", _dump(model_to_json(f)), out)
    run.finish()
    rep = f.training_report
    print(f"{args.model}: train accuracy {rep['train_accuracy']:.3f}, test accuracy {rep['test_accuracy']:.3f} -> {out}")
    return 0


def cmd_explain(args) -> int:
    from .explain import ExplanationContext, explain
    from .svg import render_attribution_svg

    run = Run(args, "explain")
    ds = _load_data(args)
    run.note_dataset("data", ds)
    tr, te = _split(args, ds)
    f = _load_model(args.model, ds.schema)
    _check_dims(f, ds)
    cfg = _explainer_configs(args.method, args)
    if len(cfg) != 1:
        raise UsageError("--method: explain takes exactly one method (use compare for several)")
    cfg = cfg[0]
    ctx = ExplanationContext(tr)
    results = []
    for r in _rows(args.rows, te.n):
        a = explain(f, te.X[r], cfg, ctx)
        results.append({"row": r, "attribution": a.to_json()})
        run.write(f"attribution-{_safe(cfg.label)}-row{r}.svg", render_attribution_svg(a, f"{cfg.label} (test row {r})"))
    run.write(f"attributions-{_safe(cfg.label)}.json", _dump({"explainer": cfg.to_json(), "results": results}))
    run.finish()
    print(f"explained {len(results)} row(s) with {cfg.label}")
    return 0


def cmd_compare(args) -> int:
    from .compare import run_disagreement_experiment
    from .explain import ExplanationContext
    from .svg import render_attribution_svg

    run = Run(args, "compare")
    ds = _load_data(args)
    run.note_dataset("data", ds)
    tr, te = _split(args, ds)
    f = _load_model(args.model, ds.schema)
    _check_dims(f, ds)
    methods = _explainer_configs(args.methods, args)
    if len(methods) < 2:
        raise UsageError("--methods: give at least two methods")
    n = min(args.n_instances, te.n)
    rep = run_disagreement_experiment(f, te.subset(np.arange(n)), methods, ExplanationContext(tr), k=args.k, keep_attributions=True)
    run.write("disagreement.json", _dump(rep.to_json()))
    run.write("disagreement.csv", rep.to_csv())
    if rep.attributions:
        first = min(rep.attributions)
        for lab, a in rep.attributions[first].items():
            run.write(f"panel-{_safe(lab)}.svg", render_attribution_svg(a, f"{lab} (test row {first})"))
    run.finish()
    for key, agg in rep.aggregates.items():
        if agg.get("n"):
            print(f"{key}: top-1 agreement {agg['top1_match_rate']:.2f}, mean rank corr {agg['mean_rank_corr']:.2f} over {agg['n']} rows")
    return 0


def cmd_counterfactual(args) -> int:
    from .counterfactual import FeatureSpace, diverse_counterfactuals

    run = Run(args, "counterfactual")
    ds = _load_data(args)
    run.note_dataset("data", ds)
    tr, te = _split(args, ds)
    f = _load_model(args.model, ds.schema)
    _check_dims(f, ds)
    space = FeatureSpace.from_dataset(tr)
    out = []
    for r in _rows(args.rows, te.n):
        cs = diverse_counterfactuals(
            f, te.X[r], space, k=args.k, budget=args.budget, seed=args.seed, metric=args.metric,
        )
        out.append({"row": r, "set": cs.to_json()})
        print(f"row {r}: {len(cs)} distinct counterfactuals ({cs.queries} queries)")
    run.write("counterfactuals.json", _dump({"k": args.k, "metric": args.metric, "budget": args.budget, "results": out}))
    run.finish()
    return 0


def cmd_attack(args) -> int:
    from .explain import ExplanationContext, parse_method
    from .manipulate import DEFAULT_SWAP_SEED, method_shopping, reference_swap_demo, scaffold_demo
    from .svg import render_attribution_svg

    run = Run(args, "attack")
    if args.lever == "reference":
        rec = reference_swap_demo(DEFAULT_SWAP_SEED if args.seed is None else args.seed)
    else:
        if not args.data:
            raise UsageError(f"--data is required for --lever {args.lever}")
        if args.feature is None:
            raise UsageError(f"--feature is required for --lever {args.lever}")
        ds = _load_data(args)
        if not 0 <= args.feature < ds.d:
            raise UsageError(f"--feature: index {args.feature} outside 0..{ds.d - 1}")
        run.note_dataset("data", ds)
        tr, te = _split(args, ds)
        if args.lever == "scaffold":
            rec = scaffold_demo(tr, args.feature, seed=args.seed)
            run.write("scaffolded-model.json", _dump(model_to_json(rec.models["scaffolded"])))
            run.write("planted-model.json", _dump(model_to_json(rec.models["real"])))
        else:
            f = _load_model(args.model, ds.schema) if args.model else train(tr, TrainConfig("gbt", seed=args.seed))
            _check_dims(f, ds)
            names = args.candidates.split(",")
            cands = []
            for nm in names:
                try:
                    base, _, bw = nm.partition("@")
                    kw = {"seed": args.seed, "n_perturbations": args.n_perturbations}
                    if bw:
                        kw["bandwidth_factor"] = float(bw)
                    cands.append(parse_method(base, **kw))
                except ValueError as exc:
                    raise UsageError(f"--candidates: {exc}") from exc
            row = args.row
            if not 0 <= row < te.n:
                raise UsageError(f"--row: {row} outside the test set (n={te.n})")
            rec = method_shopping(f, te.X[row], cands, args.objective, args.feature, ExplanationContext(tr))
    run.write("manipulation.json", _dump(rec.to_json()))
    run.write("before.svg", render_attribution_svg(rec.attribution_before, f"before ({rec.lever})"))
    run.write("after.svg", render_attribution_svg(rec.attribution_after, f"after ({rec.lever})"))
    run.finish()
    print(rec.narrative)
    return 0


def _oracle_model(args, ds):
    spec = args.oracle
    if spec.startswith("tcp:"):
        from .remote import RemoteDecisionFunction

        try:
            return RemoteDecisionFunction(spec[4:], ds.d)
        except (OSError, ValueError) as exc:
            raise UsageError(f"--oracle: cannot reach provider at {spec[4:]}: {exc}") from exc
    return _load_model(spec, ds.schema, "--oracle")


def cmd_audit(args) -> int:
    from .examiner import CHECKS, QueryOracle, audit

    run = Run(args, "audit")
    ds = _load_data(args)
    run.note_dataset("reference", ds)
    checks = tuple(c.strip() for c in args.checks.split(",") if c.strip())
    bad = [c for c in checks if c not in CHECKS]
    if bad:
        raise UsageError(f"--checks: unknown check(s) {', '.join(bad)}; choose from {', '.join(CHECKS)}")
    f = _oracle_model(args, ds)
    _check_dims(f, ds, "--oracle")
    if args.explainer and args.oracle.startswith("tcp:"):
        raise UsageError("--explainer: a remote provider only answers decision queries")
    if args.explainer:
        from .explain import ExplanationContext, parse_method

        try:
            cfg = parse_method(args.explainer, seed=args.seed)
        except ValueError as exc:
            raise UsageError(f"--explainer: {exc}") from exc
        oracle = QueryOracle.from_model(f, cfg, ExplanationContext(ds), budget=args.budget, cf_sets=cfg.method == "cf")
    else:
        oracle = QueryOracle(f, budget=args.budget)
    try:
        rep = audit(oracle, ds, checks=checks, n_instances=args.n_instances, n_pairs=args.n_pairs, seed=args.seed)
    finally:
        if hasattr(f, "close"):
            f.close()
    run.write("audit.json", _dump(rep.to_json()))
    summary = rep.summary()
    run.write("audit.txt", summary + "\n")
    run.finish()
    print(summary)
    return 0


def cmd_serve(args) -> int:
    from .remote import ProviderServer

    f = _load_model(args.model)
    server = ProviderServer(f, args.host, args.port)
    print(f"serving {f.kind} model on {server.address}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="xaudit", description="Train black-box classifiers, explain them, manipulate the explanations, audit the decisions.")
    p.add_argument("--version", action="version", version=f"xaudit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True, seed_default=0, data_flags=("--data",)):
        sp.add_argument("--seed", type=int, default=seed_default, help="single source of all randomness")
        sp.add_argument("--out-dir", default=os.environ.get(OUT_ENV, "xaudit-out"), help=f"output directory (default ${OUT_ENV} or ./xaudit-out)")
        if data:
            sp.add_argument(*data_flags, dest="data", required=True, help="CSV file, or builtin:<name> for a bundled task")
            sp.add_argument("--schema", help="schema JSON for a CSV file")
            sp.add_argument("--label", default="label", help="label column of a CSV file")
            sp.add_argument("--group", default=None, help="group column of a CSV file")
            sp.add_argument("--data-seed", type=int, default=0, help="generator seed of a bundled task")
            sp.add_argument("--test-fraction", type=float, default=0.25)

    def explainer_opts(sp):
        sp.add_argument("--n-perturbations", type=int, default=5000)
        sp.add_argument("--bandwidth", type=float, default=None, help="surrogate kernel width in standardized units")
        sp.add_argument("--cf-budget", type=int, default=20_000)

    sp = sub.add_parser("toy", help="write the two-group toy dataset")
    common(sp, data=False)
    sp.add_argument("--out", required=True, help="CSV path")
    sp.add_argument("--n-per-group", type=int, default=250)
    sp.set_defaults(func=cmd_toy)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--model", required=True, choices=("logistic", "forest", "gbt"))
    sp.add_argument("--out", help="model file (default <out-dir>/model-<kind>.json)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("explain", help="explain test rows with one method")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--method", required=True, help="shap-exact, shap-kernel, lime or cf (:baseline for Shapley)")
    sp.add_argument("--rows", default="0", help="comma-separated test-row indices")
    explainer_opts(sp)
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("compare", help="disagreement between explanation methods")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--methods", default="shap-exact,shap-kernel,cf,lime")
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--n-instances", type=int, default=20)
    explainer_opts(sp)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("counterfactual", help="diverse counterfactuals for test rows")
    common(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--rows", default="0")
    sp.add_argument("--k", type=int, default=10)
    sp.add_argument("--metric", default="mad_l1", choices=("mad_l1", "l2"))
    sp.add_argument("--budget", type=int, default=20_000)
    sp.set_defaults(func=cmd_counterfactual)

    sp = sub.add_parser("attack", help="provider-side manipulation demos")
    common(sp, data=False, seed_default=None)
    sp.add_argument("--lever", required=True, choices=("reference", "shopping", "scaffold"))
    sp.add_argument("--data", help="CSV file or builtin:<name> (shopping, scaffold)")
    sp.add_argument("--schema")
    sp.add_argument("--label", default="label")
    sp.add_argument("--group", default=None)
    sp.add_argument("--data-seed", type=int, default=0)
    sp.add_argument("--test-fraction", type=float, default=0.25)
    sp.add_argument("--feature", type=int, help="0-based feature index to hide or demote")
    sp.add_argument("--model", help="model file for shopping (default: gbt trained here)")
    sp.add_argument("--row", type=int, default=0, help="test row for shopping")
    sp.add_argument("--objective", default="minimize", choices=("minimize", "move_argmax"))
    sp.add_argument("--candidates", default="shap-exact,shap-exact:baseline,lime@0.5,lime@5,cf",
                    help="methods; lime@F sets bandwidth F*sqrt(d)")
    sp.add_argument("--n-perturbations", type=int, default=5000)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("audit", help="query-only examiner run")
    common(sp, data_flags=("--reference", "--data"))
    sp.add_argument("--oracle", required=True, help="model file, or tcp:<host>:<port> of a running provider")
    sp.add_argument("--budget", type=int, default=10_000)
    sp.add_argument("--checks", default="fairness,scaffold,consistency")
    sp.add_argument("--n-pairs", type=int, default=100)
    sp.add_argument("--n-instances", type=int, default=5, help="rows whose explanations are checked")
    sp.add_argument("--explainer", help="with a model-file oracle: method the provider explains with")
    sp.set_defaults(func=cmd_audit)

    sp = sub.add_parser("serve", help="serve a model file as a provider process (NDJSON over TCP)")
    sp.add_argument("--model", required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "attack" and args.seed is None and args.lever != "reference":
        args.seed = 0
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"xaudit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (XAuditError, ValueError, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"xaudit {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
