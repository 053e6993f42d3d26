"""umx command line: generate models, simulate, score, train, extract, evaluate."""

from __future__ import annotations

import os

# cap BLAS threads before numpy loads
_threads = os.environ.get("UMX_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import hashlib
import json
import shutil
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from umx import __version__
from umx.archscore import score_report
from umx.evaluator import derive_seed, lsa, random_corpus, run_benchmark, train_hint_sets
from umx.extractor import HINT_SETS, SequenceClassifier, TrainConfig, extract
from umx.lowering import lower_to_kernels
from umx.model_zoo import (
    BENCHMARKS,
    LayerType,
    ModelSpec,
    RandomModelConfig,
    build_benchmark,
    generate_random_model,
    load_model,
    save_model,
)
from umx.umsim import MemoryConfig, NoiseProfile, read_trace, simulate_run, write_trace


class CliError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    mem: MemoryConfig = field(default_factory=MemoryConfig)
    noise: NoiseProfile = field(default_factory=NoiseProfile)
    attack_noise: NoiseProfile = field(default_factory=NoiseProfile.snooped)
    corpus: RandomModelConfig = field(default_factory=RandomModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    corpus_size: int = 200
    bench_runs: int = 10
    paths: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "mem": asdict(self.mem),
            "noise": self.noise.to_dict(),
            "attack_noise": self.attack_noise.to_dict(),
            "corpus": self.corpus.to_dict(),
            "train": asdict(self.train),
            "seed": self.seed,
            "corpus_size": self.corpus_size,
            "bench_runs": self.bench_runs,
            "paths": dict(self.paths),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> RunConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise CliError(f"unknown config fields {sorted(unknown)}")
        base = cls()
        return cls(
            mem=MemoryConfig(**d["mem"]) if "mem" in d else base.mem,
            noise=NoiseProfile.from_dict(d["noise"]) if "noise" in d else base.noise,
            attack_noise=NoiseProfile.from_dict(d["attack_noise"]) if "attack_noise" in d else base.attack_noise,
            corpus=RandomModelConfig.from_dict(d["corpus"]) if "corpus" in d else base.corpus,
            train=TrainConfig.from_dict(d["train"]) if "train" in d else base.train,
            seed=int(d.get("seed", base.seed)),
            corpus_size=int(d.get("corpus_size", base.corpus_size)),
            bench_runs=int(d.get("bench_runs", base.bench_runs)),
            paths=dict(d.get("paths", {})),
        )

    def digest(self) -> str:
        doc = json.dumps({"version": __version__, "config": self.to_dict()}, sort_keys=True)
        return hashlib.sha256(doc.encode()).hexdigest()[:16]


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            cfg = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as e:
            raise CliError(f"cannot read config {args.config}: {e}") from None
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "noiseless", False):
        cfg = replace(cfg, noise=NoiseProfile.noiseless(), attack_noise=NoiseProfile.noiseless())
    cfg.mem.check()
    cfg.noise.check()
    cfg.attack_noise.check()
    cfg.corpus.check()
    cfg.train.check()
    return cfg


class Outputs:
    """Track created files and directories so a failed command leaves nothing behind."""

    def __init__(self) -> None:
        self.created: list[Path] = []

    def dir(self, path: str | Path) -> Path:
        p = Path(path)
        if not p.exists():
            p.mkdir(parents=True)
            self.created.append(p)
        return p

    def file(self, path: str | Path) -> Path:
        p = Path(path)
        if p.parent != Path(""):
            self.dir(p.parent)
        self.created.append(p)
        return p

    def rollback(self) -> None:
        for p in reversed(self.created):
            if p.is_dir():
                shutil.rmtree(p, ignore_errors=True)
            elif p.exists():
                p.unlink()


def _load_model_arg(ref: str) -> ModelSpec:
    if ref in BENCHMARKS:
        return build_benchmark(ref)
    path = Path(ref)
    if not path.is_file():
        raise CliError(f"no benchmark or model file named {ref!r}")
    return load_model(path)


def _say(msg: str) -> None:
    print(msg, flush=True)


def cmd_gen_models(args, cfg: RunConfig, out: Outputs) -> None:
    if args.count < 0:
        raise CliError("--count must be >= 0")
    d = out.dir(args.out)
    for i in range(args.count):
        spec = generate_random_model(cfg.corpus, derive_seed(cfg.seed, "gen-models", i))
        save_model(spec, out.file(d / f"model_{i:04d}.json"))
    _say(f"wrote {args.count} models to {d}")


def cmd_simulate(args, cfg: RunConfig, out: Outputs) -> None:
    if args.runs < 1:
        raise CliError("--runs must be >= 1")
    spec = _load_model_arg(args.model)
    seq = lower_to_kernels(spec)
    d = out.dir(args.out)
    noise = cfg.attack_noise if args.attack else cfg.noise
    for r in range(args.runs):
        trace = simulate_run(seq, cfg.mem, noise, derive_seed(cfg.seed, f"simulate:{spec.name}", r))
        trace.header["run_config_digest"] = cfg.digest()
        write_trace(trace, out.file(d / f"{spec.name}_run{r:02d}.jsonl"))
    _say(f"wrote {args.runs} traces of {spec.name} ({len(seq)} kernels) to {d}")


def cmd_score(args, cfg: RunConfig, out: Outputs) -> None:
    paths = sorted(Path(args.traces).glob("*.jsonl")) if Path(args.traces).is_dir() else [Path(args.traces)]
    if not paths:
        raise CliError(f"no traces found under {args.traces}")
    traces = [read_trace(p) for p in paths]
    report = score_report(traces, aggregate=args.aggregate, dis_layers=args.dis_layers)
    report.write_csv(out.file(args.out))
    for h in report.ranking():
        s = report.hints[h]
        _say(f"{h:10s} dis={s.cov_dis:.4f} con={s.cov_con:.5f} arch_es={s.arch_es:.2f}")


def _corpus_from_args(args, cfg: RunConfig):
    if args.models:
        files = sorted(Path(args.models).glob("*.json"))
        if not files:
            raise CliError(f"no model files in {args.models}")
        corpus = []
        for i, f in enumerate(files):
            t = simulate_run(lower_to_kernels(load_model(f)), cfg.mem, cfg.attack_noise,
                             derive_seed(cfg.seed, "corpus-trace", i))
            corpus.append((t, t.truth_labels))
        return corpus
    return random_corpus(cfg.corpus_size, cfg.corpus, cfg.mem, cfg.attack_noise, cfg.seed)


def _train_one(hs: str, corpus, cfg: RunConfig, verbose: bool) -> SequenceClassifier:
    return train_hint_sets(corpus, [hs], cfg.train, cfg.seed, log=_say if verbose else None)[hs]


def cmd_train(args, cfg: RunConfig, out: Outputs) -> None:
    corpus = _corpus_from_args(args, cfg)
    clf = _train_one(args.hints, corpus, cfg, args.verbose)
    clf.save(out.file(args.out))
    _say(f"trained {args.hints} on {len(corpus)} traces; final loss {clf.history[-1] if clf.history else float('nan'):.4f}")


def cmd_extract(args, cfg: RunConfig, out: Outputs) -> None:
    clf = SequenceClassifier.load(args.checkpoint)
    trace = read_trace(args.trace)
    res = extract(clf, trace, args.hints)
    doc = {
        "model": trace.model_name,
        "hint_set": clf.hint_set.id,
        "layers": [l.value for l in res.layers],
        "positions": res.positions,
        "dims": [
            {"layer": d.layer, "type": d.type.value, "filter_bytes_est": d.filter_bytes_est,
             "io_bytes_est": d.io_bytes_est}
            for d in res.dim_estimates
        ],
    }
    text = json.dumps(doc, indent=1) + "\n"
    if args.out:
        out.file(args.out).write_text(text)
    _say(" ".join(doc["layers"]))


def _read_layers(path: str) -> list[LayerType]:
    if path in BENCHMARKS and not Path(path).exists():
        return build_benchmark(path).layer_types()
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(f"cannot read {path}: {e}") from None
    if isinstance(doc, dict) and "layers" in doc and doc["layers"] and isinstance(doc["layers"][0], dict):
        return [l.type for l in load_model(path).layers]
    seq = doc["layers"] if isinstance(doc, dict) else doc
    try:
        return [LayerType(t) for t in seq]
    except (TypeError, ValueError):
        raise CliError(f"{path}: expected a list of layer types or a model file") from None


def cmd_eval(args, cfg: RunConfig, out: Outputs) -> None:
    pred = _read_layers(args.pred)
    truth = _read_layers(args.truth)
    _say(f"{lsa(pred, truth):.6g}")


def cmd_bench(args, cfg: RunConfig, out: Outputs) -> None:
    sets = [s.strip() for s in args.hints.split(",") if s.strip()]
    for s in sets:
        if s not in HINT_SETS:
            raise CliError(f"unknown hint set {s!r}")
    suite = args.models.split(",") if args.models else list(BENCHMARKS)
    for m in suite:
        if m not in BENCHMARKS:
            raise CliError(f"unknown benchmark {m!r}")
    runs = args.runs or cfg.bench_runs
    clfs: dict[str, SequenceClassifier] = {}
    corpus = None
    for s in sets:
        ckpt = Path(args.checkpoints) / f"{s}.json" if args.checkpoints else None
        if ckpt is not None and ckpt.is_file():
            clfs[s] = SequenceClassifier.load(ckpt)
            continue
        if corpus is None:
            corpus = random_corpus(cfg.corpus_size, cfg.corpus, cfg.mem, cfg.attack_noise, cfg.seed)
        _say(f"training {s} on {len(corpus)} random models")
        clfs[s] = _train_one(s, corpus, cfg, args.verbose)
    report = run_benchmark(suite, sets, clfs, runs, cfg.mem, cfg.attack_noise, cfg.seed)
    d = out.dir(args.out)
    report.write_runs_csv(out.file(d / "runs.csv"))
    report.write_summary_csv(out.file(d / "summary.csv"))
    out.file(d / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    for s in sets:
        _say(f"{s}: seq={report.group_mean('seq', s):.3f} nonseq={report.group_mean('nonseq', s):.3f} "
             f"all={report.group_mean('all', s):.3f}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON; flags override its fields")
    common.add_argument("--seed", type=int, default=None, help="root seed")
    common.add_argument("--noiseless", action="store_true", help="disable all simulated noise")

    p = argparse.ArgumentParser(prog="umx", description=__doc__)
    p.add_argument("--version", action="version", version=f"umx {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-models", parents=[common], help="write random model specs")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_models)

    s = sub.add_parser("simulate", parents=[common], help="simulate repeated runs of a model")
    s.add_argument("--model", required=True, help="benchmark name or model JSON path")
    s.add_argument("--runs", type=int, default=10)
    s.add_argument("--out", required=True)
    s.add_argument("--attack", action="store_true", help="use the attack observation noise profile")
    s.set_defaults(func=cmd_simulate)

    sc = sub.add_parser("score", parents=[common], help="score hints from repeated traces")
    sc.add_argument("--traces", required=True, help="directory of JSONL traces of one model")
    sc.add_argument("--out", required=True)
    sc.add_argument("--aggregate", choices=("mean", "median"), default="mean")
    sc.add_argument("--dis-layers", choices=("all", "nonzero"), default="all")
    sc.set_defaults(func=cmd_score)

    t = sub.add_parser("train", parents=[common], help="train a kernel classifier")
    t.add_argument("--hints", choices=sorted(HINT_SETS), default="s5")
    t.add_argument("--models", help="directory of model JSONs (default: generate a random corpus)")
    t.add_argument("--out", required=True)
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("extract", parents=[common], help="extract a layer sequence from a trace")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--trace", required=True)
    e.add_argument("--hints", choices=sorted(HINT_SETS), default=None,
                   help="expected hint set; must match the checkpoint")
    e.add_argument("--out")
    e.set_defaults(func=cmd_extract)

    ev = sub.add_parser("eval", parents=[common], help="layer sequence accuracy of a prediction")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--truth", required=True, help="truth model file, layer list, or benchmark name")
    ev.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common], help="train and score hint sets on the benchmarks")
    b.add_argument("--hints", default="s1,s2,s3,s4,s5")
    b.add_argument("--models", default=None, help="comma-separated benchmark subset")
    b.add_argument("--runs", type=int, default=None)
    b.add_argument("--checkpoints", help="directory with <hint_set>.json checkpoints to reuse")
    b.add_argument("--out", required=True)
    b.add_argument("--verbose", action="store_true")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    out = Outputs()
    try:
        cfg = resolve_config(args)
        _say(f"run-config digest {cfg.digest()}")
        args.func(args, cfg, out)
    except KeyboardInterrupt:
        out.rollback()
        raise
    except Exception as e:  # every failure maps to exit 2 with a one-line message
        out.rollback()
        print(f"umx {args.command}: error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
