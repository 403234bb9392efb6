"""Batch front-end: parse norm-descriptor JSON, evaluate, build surrogates,
certify, and emit reports.

Exit codes: 0 success, 1 validation error, 2 numerical/convergence error,
3 certification dominance failure.  All reports are written atomically
(temp file + rename) and are byte-identical for identical (spec, seed).
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile

import numpy as np

from . import builder, certify
from .core import (
    AggregateDescriptor,
    EllitopeNormDescriptor,
    LpDescriptor,
    PullbackDescriptor,
    QuotientDescriptor,
    SchattenDescriptor,
    SpectratopeNormDescriptor,
)
from .errors import ConvergenceError, NumericalError, RegnormError
from .geometry import ellitope, spectratope
from .proxlab import ProxProblem, mirror_descent, random_quadratic
from .theta import linear_theta, theta_lq

__all__ = ["run", "main", "load_spec_file", "run_tasks", "SPEC_SCHEMA"]

#: Matrices strictly below this edge length may be embedded in the JSON spec;
#: anything larger must be referenced by file path.
EMBED_LIMIT = 64

_MATRIX = {"type": "array", "minItems": 1,
           "items": {"type": "array", "minItems": 1, "items": {"type": "number"}}}

_P_NUMBER = {"oneOf": [{"type": "number", "minimum": 1}, {"const": "inf"}]}

SPEC_SCHEMA = {
    "type": "object",
    "properties": {
        "norms": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {"$ref": "#/$defs/descriptor"},
        },
        "tasks": {"type": "array", "items": {"$ref": "#/$defs/task"}},
    },
    "required": ["norms"],
    "additionalProperties": False,
    "$defs": {
        "theta": {
            "oneOf": [
                {
                    "type": "object",
                    "properties": {
                        "type": {"const": "lq"},
                        "q": {"type": "number", "minimum": 1},
                        "k": {"type": "integer", "minimum": 1},
                    },
                    "required": ["type", "q", "k"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {
                        "type": {"const": "weighted_sum"},
                        "weights": {"type": "array", "minItems": 1,
                                    "items": {"type": "number", "exclusiveMinimum": 0}},
                    },
                    "required": ["type", "weights"],
                    "additionalProperties": False,
                },
            ]
        },
        "descriptor": {
            "oneOf": [
                {
                    "type": "object",
                    "properties": {
                        "type": {"const": "lp"},
                        "p": _P_NUMBER,
                        "n": {"type": "integer", "minimum": 1},
                    },
                    "required": ["type", "p", "n"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {
                        "type": {"const": "schatten"},
                        "p": _P_NUMBER,
                        "m": {"type": "integer", "minimum": 1},
                        "n": {"type": "integer", "minimum": 1},
                    },
                    "required": ["type", "p", "m", "n"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {
                        "type": {"const": "pullback"},
                        "A": _MATRIX,
                        "A_path": {"type": "string"},
                        "child": {"$ref": "#/$defs/descriptor"},
                    },
                    "required": ["type", "child"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {
                        "type": {"const": "aggregate"},
                        "theta": {"$ref": "#/$defs/theta"},
                        "children": {"type": "array", "minItems": 1,
                                     "items": {"$ref": "#/$defs/descriptor"}},
                        "mode": {"enum": ["general", "absolute"]},
                    },
                    "required": ["type", "theta", "children"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {
                        "type": {"const": "quotient"},
                        "P": _MATRIX,
                        "P_path": {"type": "string"},
                        "child": {"$ref": "#/$defs/descriptor"},
                    },
                    "required": ["type", "child"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {
                        "type": {"const": "ellitope"},
                        "n": {"type": "integer", "minimum": 1},
                        "t_matrices": {"type": "array", "minItems": 1, "items": _MATRIX},
                        "theta": {"$ref": "#/$defs/theta"},
                        "p_matrix": _MATRIX,
                        "p_path": {"type": "string"},
                    },
                    "required": ["type", "n", "t_matrices", "theta"],
                    "additionalProperties": False,
                },
                {
                    "type": "object",
                    "properties": {
                        "type": {"const": "spectratope"},
                        "n": {"type": "integer", "minimum": 1},
                        "s_maps": {"type": "array", "minItems": 1,
                                   "items": {"type": "array", "minItems": 1, "items": _MATRIX}},
                        "theta": {"$ref": "#/$defs/theta"},
                        "p_matrix": _MATRIX,
                        "p_path": {"type": "string"},
                    },
                    "required": ["type", "n", "s_maps", "theta"],
                    "additionalProperties": False,
                },
            ]
        },
        "task": {
            "type": "object",
            "properties": {
                "op": {"const": "compare-norms"},
                "a": {"type": "string"},
                "b": {"type": "string"},
                "samples": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer", "minimum": 0},
                "tol": {"type": "number", "exclusiveMinimum": 0},
            },
            "required": ["op", "a", "b", "samples", "seed", "tol"],
            "additionalProperties": False,
        },
    },
}


class SpecFileError(RegnormError):
    """The spec file failed validation."""


def _load_matrix_field(node, key, base_dir):
    embedded = node.get(key)
    path = node.get(f"{key}_path") or node.get(f"{key.lower()}_path")
    if embedded is not None and path is not None:
        raise SpecFileError(f"give either {key} or {key}_path, not both")
    if embedded is not None:
        M = np.asarray(embedded, dtype=float)
        if max(M.shape) >= EMBED_LIMIT:
            raise SpecFileError(
                f"matrices of size {M.shape} must be referenced by file path, not embedded"
            )
        return M
    if path is not None:
        return load_matrix(os.path.join(base_dir, path))
    return None


def _parse_theta(node):
    if node["type"] == "lq":
        return theta_lq(node["q"], node["k"])
    return linear_theta(node["weights"])


def _parse_p(value):
    return math.inf if value == "inf" else float(value)


def parse_descriptor(node, base_dir="."):
    kind = node["type"]
    if kind == "lp":
        return LpDescriptor(_parse_p(node["p"]), node["n"])
    if kind == "schatten":
        return SchattenDescriptor(_parse_p(node["p"]), node["m"], node["n"])
    if kind == "pullback":
        A = _load_matrix_field(node, "A", base_dir)
        if A is None:
            raise SpecFileError("pullback descriptor needs A or A_path")
        return PullbackDescriptor(A, parse_descriptor(node["child"], base_dir))
    if kind == "aggregate":
        theta = _parse_theta(node["theta"])
        children = tuple(parse_descriptor(c, base_dir) for c in node["children"])
        mode = node.get("mode", "general")
        theta_cert = None
        if mode == "absolute":
            if node["theta"]["type"] != "lq":
                raise SpecFileError("absolute-mode aggregation is wired for lq aggregators")
            theta_cert = builder.lq_theta_certificate(node["theta"]["q"], node["theta"]["k"])
        return AggregateDescriptor(theta=theta, children=children, mode=mode,
                                   theta_cert=theta_cert)
    if kind == "quotient":
        P = _load_matrix_field(node, "P", base_dir)
        if P is None:
            raise SpecFileError("quotient descriptor needs P or P_path")
        return QuotientDescriptor(P, parse_descriptor(node["child"], base_dir))
    if kind == "ellitope":
        P = _load_matrix_field(node, "p_matrix", base_dir)
        if P is None and "p_path" in node:
            P = load_matrix(os.path.join(base_dir, node["p_path"]))
        body = ellitope([np.asarray(T, dtype=float) for T in node["t_matrices"]],
                        _parse_theta(node["theta"]), P=P)
        if body.n != node["n"]:
            raise SpecFileError("ellitope ambient dimension does not match its matrices")
        return EllitopeNormDescriptor(body)
    if kind == "spectratope":
        P = _load_matrix_field(node, "p_matrix", base_dir)
        if P is None and "p_path" in node:
            P = load_matrix(os.path.join(base_dir, node["p_path"]))
        maps = [np.asarray(S, dtype=float) for S in node["s_maps"]]
        body = spectratope(maps, _parse_theta(node["theta"]), P=P)
        if body.n != node["n"]:
            raise SpecFileError("spectratope ambient dimension does not match its maps")
        return SpectratopeNormDescriptor(body)
    raise SpecFileError(f"unknown descriptor type {kind!r}")


def load_spec_file(path):
    """Parse and schema-validate a spec file; returns (norms dict, tasks list)."""
    import jsonschema

    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SpecFileError(f"not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(doc, SPEC_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise SpecFileError(f"spec failed schema validation: {exc.message}") from exc
    base_dir = os.path.dirname(os.path.abspath(path))
    norms = {name: parse_descriptor(node, base_dir)
             for name, node in doc["norms"].items()}
    return norms, doc.get("tasks", [])


def run_tasks(norms, tasks):
    """Execute the cross-check tasks of a spec file; returns result dicts."""
    results = []
    for task in tasks:
        a, b = norms[task["a"]], norms[task["b"]]
        if a.dim != b.dim:
            raise SpecFileError(f"task compares norms of different dimension: {task}")
        rng = np.random.default_rng(task["seed"])
        X = rng.standard_normal((task["samples"], a.dim))
        va = np.asarray(builder.norm_value(a, X))
        vb = np.asarray(builder.norm_value(b, X))
        dev = float(np.max(np.abs(va - vb) / np.maximum(np.abs(vb), 1e-300)))
        results.append({"op": task["op"], "a": task["a"], "b": task["b"],
                        "max_rel_dev": dev, "tol": task["tol"],
                        "pass": dev <= task["tol"]})
    return results


# --- file io -----------------------------------------------------------------

def load_matrix(path):
    M = np.loadtxt(path, delimiter=",", ndmin=2, dtype=float)
    return M


def load_points(path):
    """Rows of a CSV file as evaluation points."""
    return load_matrix(path)


def write_atomically(path, text):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".regnorm-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _require_norm(norms, name):
    if name not in norms:
        raise SpecFileError(f"norm {name!r} is not defined in the spec "
                            f"(available: {', '.join(sorted(norms))})")
    return norms[name]


# --- subcommands --------------------------------------------------------------

def _cmd_eval(args):
    norms, _ = load_spec_file(args.spec)
    desc = _require_norm(norms, args.norm)
    X = load_points(args.x)
    if X.shape[1] != desc.dim:
        raise SpecFileError(f"points have dimension {X.shape[1]}, norm expects {desc.dim}")
    vals = np.atleast_1d(builder.norm_value(desc, X))
    for v in vals:
        print(repr(float(v)))
    return 0


def _cmd_surrogate(args):
    norms, _ = load_spec_file(args.spec)
    desc = _require_norm(norms, args.norm)
    cert = builder.build_certificate(desc)
    payload = {
        "norm": args.norm,
        "dim": cert.surrogate.dim,
        "kappa": repr(float(cert.kappa)),
        "sigma": repr(float(cert.sigma)),
        "surrogate": cert.surrogate.name,
        "trace": [
            {"rule": s.rule,
             "params": {k: (repr(float(v)) if isinstance(v, float) else v)
                        for k, v in sorted(s.params.items())},
             "kappa": repr(float(s.kappa)),
             "sigma": repr(float(s.sigma)),
             "note": s.note}
            for s in cert.trace
        ],
    }
    write_atomically(args.out, json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(f"surrogate for {args.norm}: kappa={cert.kappa:g}, sigma={cert.sigma:g} -> {args.out}")
    return 0


def _cmd_certify(args):
    norms, _ = load_spec_file(args.spec)
    desc = _require_norm(norms, args.norm)
    cert = builder.build_certificate(desc)
    report = certify.certify_surrogate(
        args.norm, cert,
        exact_norm=lambda X: builder.norm_value(desc, X),
        n_samples=args.samples, seed=args.seed,
    )
    text = report.to_csv() if args.report.endswith(".csv") else report.to_json()
    write_atomically(args.report, text)
    for c in report.checks:
        print(f"{c.check_id}: max {c.max_ratio:.6g} vs bound {c.bound:.6g} "
              f"[{'pass' if c.passed else 'FAIL'}]")
    if not report.ok:
        print("certification dominance failure", file=sys.stderr)
        return 3
    return 0


def _cmd_quotient_eval(args):
    norms, _ = load_spec_file(args.spec)
    desc = _require_norm(norms, args.norm)
    if not isinstance(desc, QuotientDescriptor):
        raise SpecFileError(f"{args.norm!r} is not a quotient descriptor")
    U = load_points(args.u)
    if U.shape[1] != desc.dim:
        raise SpecFileError(f"points have dimension {U.shape[1]}, quotient expects {desc.dim}")
    from .quotient import quotient_eval, quotient_norm
    child_cert = builder.build_certificate(desc.child)
    qn = quotient_norm(desc.P, child_cert.surrogate,
                       child_norm=lambda X: builder.norm_value(desc.child, X))
    vals, argmins = quotient_eval(qn, U, which=args.mode)
    for v in np.atleast_1d(vals):
        print(repr(float(v)))
    if args.out:
        rows = "\n".join(",".join(repr(float(t)) for t in row) for row in np.atleast_2d(argmins))
        write_atomically(args.out, rows + "\n")
    return 0


def _cmd_prox_demo(args):
    norms, _ = load_spec_file(args.spec)
    desc = _require_norm(norms, args.ball)
    dims = [int(d) for d in args.dims.split(",")] if args.dims else [desc.dim]
    if not isinstance(desc, LpDescriptor) and dims != [desc.dim]:
        raise SpecFileError("--dims resizing is only defined for lp balls")
    lines = ["dim,seed,iter,gap,time_ms"]
    summary = {}
    for dim in dims:
        ball = LpDescriptor(desc.p, dim) if isinstance(desc, LpDescriptor) else desc
        cert = builder.build_certificate(ball)
        ball_norm = lambda X, b=ball: np.atleast_1d(builder.norm_value(b, X))
        dual = _dual_norm_rows(ball)
        counts = []
        for seed in range(args.seeds):
            objective = random_quadratic(dim, seed, ball_norm, dual_norm=dual)
            problem = ProxProblem(objective=objective, ball_norm=ball_norm,
                                  dgf=cert.surrogate, target_accuracy=args.epsilon)
            trajectory, iters = mirror_descent(problem, max_iters=args.max_iters)
            counts.append(iters)
            for it, gap, ms in trajectory:
                lines.append(f"{dim},{seed},{it},{repr(float(gap))},{ms:.3f}")
        summary[dim] = counts
        shown = [c if c is not None else f">{args.max_iters}" for c in counts]
        print(f"dim {dim}: iterations to eps={args.epsilon:g}: {shown}")
    if args.out:
        write_atomically(args.out, "\n".join(lines) + "\n")
    if any(c is None for counts in summary.values() for c in counts):
        raise ConvergenceError("a prox-demo run exhausted its iteration budget")
    return 0


def _dual_norm_rows(desc):
    if isinstance(desc, LpDescriptor) and not math.isinf(desc.p):
        if desc.p == 1.0:
            return lambda A: np.abs(A).max(axis=1)
        q = desc.p / (desc.p - 1.0)
        return lambda A: (np.abs(A) ** q).sum(axis=1) ** (1.0 / q)
    return None


def build_parser():
    parser = argparse.ArgumentParser(
        prog="regnorm",
        description="construct, evaluate and empirically certify smooth norm surrogates",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="evaluate a named norm at points from a CSV file")
    p.add_argument("--spec", required=True)
    p.add_argument("--norm", required=True)
    p.add_argument("--x", required=True, help="CSV of evaluation points, one per row")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("surrogate", help="build the smooth surrogate and write its certificate")
    p.add_argument("--spec", required=True)
    p.add_argument("--norm", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_surrogate)

    p = sub.add_parser("certify", help="run the empirical falsifier suite against a certificate")
    p.add_argument("--spec", required=True)
    p.add_argument("--norm", required=True)
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--report", required=True, help=".json or .csv output path")
    p.set_defaults(fn=_cmd_certify)

    p = sub.add_parser("quotient-eval", help="evaluate a quotient norm and its minimizer")
    p.add_argument("--spec", required=True)
    p.add_argument("--norm", required=True)
    p.add_argument("--u", required=True, help="CSV of points, one per row")
    p.add_argument("--mode", choices=["surrogate", "original"], default="original")
    p.add_argument("--out", help="optional CSV path for the minimizers")
    p.set_defaults(fn=_cmd_quotient_eval)

    p = sub.add_parser("prox-demo", help="mirror-descent scaling demo on a ball family")
    p.add_argument("--spec", required=True)
    p.add_argument("--ball", required=True)
    p.add_argument("--dims", help="comma-separated dimensions (lp balls only)")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--max-iters", type=int, default=30_000)
    p.add_argument("--out", help="trajectory CSV path")
    p.set_defaults(fn=_cmd_prox_demo)
    return parser


def run(argv):
    """Entry point used by tests: returns the exit code instead of exiting."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (NumericalError, ConvergenceError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except (RegnormError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
