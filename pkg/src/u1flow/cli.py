"""Command-line driver: ``u1flow {hmc,train,fthmc,transfer,exact,analyze,replay}``.

Every option can also come from a flat ``key = value`` file passed with
``--config``; keys are the long option names (dashes or underscores) and
explicit flags override the file. Unknown keys are rejected.

Exit codes: 0 ok, 2 configuration, 3 input format, 4 numerical failure.
Failures print a final ``error_code=<n>`` line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, flow, formats, fthmc, hmc, lattice, statistics, training

log = logging.getLogger("u1flow")

EXIT_OK, EXIT_CONFIG, EXIT_FORMAT, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def _hidden(text: str) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)
    except ValueError as err:
        raise argparse.ArgumentTypeError(f"hidden must be comma-separated integers, got {text!r}") from err
    if any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("hidden channel counts must be positive")
    return vals


def _common(p, lattice_required=True):
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--beta", type=float, required=lattice_required)
    p.add_argument("--lx", type=int, required=lattice_required)
    p.add_argument("--ly", type=int)


def _sampler(p):
    p.add_argument("--eps", type=float, default=0.1, help="leapfrog step size")
    p.add_argument("--nlf", type=int, default=10, help="leapfrog steps per trajectory")
    p.add_argument("--ntraj", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start", choices=["cold", "random"], default="cold")
    p.add_argument("--chains", type=int, default=1, help="independent seeded chains")
    p.add_argument("--save-every", type=int, default=1, help="keep every k-th configuration in --out")
    p.add_argument("--out", help="ensemble file")
    p.add_argument("--obs", help="observables CSV")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="u1flow", description="2D U(1) gauge theory: HMC, flow training, flow-assisted HMC.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("hmc", help="plain HMC on the Wilson action")
    _common(p)
    _sampler(p)

    p = sub.add_parser("train", help="reverse-KL training of a gauge-equivariant flow")
    _common(p)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--eval-batch-size", type=int, default=0, help="> 0: ESS on an independent batch")
    p.add_argument("--clip-norm", type=float, default=10.0)
    p.add_argument("--n-layers", type=int, default=8)
    p.add_argument("--hidden", type=_hidden, default=(16, 16))
    p.add_argument("--kernel-size", type=int, default=3)
    p.add_argument("--init-scale", type=float, default=0.0, help="scale of the output convs; 0 starts at identity")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("fthmc", help="HMC on latent links of a trained flow")
    _common(p, lattice_required=False)
    p.add_argument("--checkpoint", required=True)
    _sampler(p)

    p = sub.add_parser("transfer", help="re-target a checkpoint to another lattice volume")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lx", type=int, required=True)
    p.add_argument("--ly", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("exact", help="print the exact average plaquette on a torus")
    _common(p)

    p = sub.add_parser("analyze", help="summarize observable CSVs")
    p.add_argument("--config")
    p.add_argument("obs", nargs="+", help="observables CSV files (one per chain)")
    p.add_argument("--beta", type=float)
    p.add_argument("--lx", type=int)
    p.add_argument("--ly", type=int)
    p.add_argument("--burn-in", type=int, default=0)
    p.add_argument("--block-size", type=int, default=0, help="bootstrap block length; 0 picks one from tau_int")
    p.add_argument("--n-boot", type=int, default=1000)
    p.add_argument("--checkpoint", help="also report the flow's importance-sampling ESS")
    p.add_argument("--ess-samples", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--summary", help="summary JSON path (default: stdout)")
    p.add_argument("--plot", help="write a Q / plaquette history figure (png, svg, pdf)")

    p = sub.add_parser("replay", help="re-run the command recorded in a run manifest")
    p.add_argument("manifest")
    return parser


def _subparser(parser, name) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _config_path(argv) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _command(argv) -> str | None:
    return next((tok for tok in argv if not tok.startswith("-")), None)


def parse_args(argv) -> argparse.Namespace:
    """Parse ``argv``, folding in ``--config`` values underneath explicit flags."""
    parser = build_parser()
    path, command = _config_path(argv), _command(argv)
    if path and command in COMMANDS:
        sp = _subparser(parser, command)
        dests = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
        values = formats.read_config_file(path)
        unknown = sorted(set(values) - set(dests))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for key, value in values.items():
            action = dests[key]
            action.default = value.split() if action.nargs in ("+", "*") else value
            action.required = False
    return parser.parse_args(argv)


# ----------------------------------------------------------------- manifests

def _resolved(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("config", "verbose"):
            continue
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _utc() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(path, args, started: str, extra: dict | None = None) -> Path:
    path = Path(str(path) + ".manifest.json")
    body = {
        "artifact": "u1flow",
        "version": __version__,
        "command": args.command,
        "config": _resolved(args),
        "seed": getattr(args, "seed", None),
        "started": started,
        "finished": _utc(),
    }
    body.update(extra or {})
    formats.write_json(path, body)
    return path


def manifest_argv(manifest: dict) -> list[str]:
    """Rebuild the command line that reproduces a recorded run."""
    cfg = dict(manifest["config"])
    command = cfg.pop("command", manifest["command"])
    sp = _subparser(build_parser(), command)
    argv = [command]
    positional = []
    for action in sp._actions:
        if action.dest not in cfg or action.dest in ("help", "config"):
            continue
        value = cfg[action.dest]
        if value is None:
            continue
        if not action.option_strings:
            positional += [str(v) for v in (value if isinstance(value, list) else [value])]
            continue
        flag = max(action.option_strings, key=len)
        if action.dest == "hidden":
            value = ",".join(str(v) for v in value)
        argv += [flag, str(value)]
    return argv + positional


# ------------------------------------------------------------------ helpers

def _geometry(args, fallback=None) -> lattice.LatticeGeometry:
    lx = args.lx if args.lx is not None else (fallback or {}).get("lx")
    ly = args.ly if args.ly is not None else (fallback or {}).get("ly", lx)
    if lx is None:
        raise ConfigError("lattice size missing: pass --lx (and --ly)")
    return lattice.LatticeGeometry(int(lx), int(ly if ly is not None else lx))


def _start(args, geom, rng) -> np.ndarray:
    if args.start == "cold":
        return lattice.cold_config(geom)
    return lattice.random_config(geom, rng)


def _chain_paths(path, chains: int, k: int):
    if path is None:
        return None
    if chains == 1:
        return Path(path)
    p = Path(path)
    return p.with_name(f"{p.stem}.chain{k}{p.suffix}")


def _run_chains(args, geom, beta, run_one, extra=None) -> int:
    if args.chains < 1 or args.save_every < 1:
        raise ConfigError("chains and save-every must be >= 1")
    started = _utc()
    params = hmc.HmcParams(step_size=args.eps, n_leapfrog=args.nlf, seed=args.seed, n_traj=args.ntraj)
    for k, rng in enumerate(hmc.chain_rngs(args.seed, args.chains)):
        records: list[hmc.ChainRecord] = []
        recorder = formats.EnsembleRecorder(beta, args.save_every) if args.out else None

        def sink(rec, records=records, recorder=recorder):
            records.append(rec)

        start = _start(args, geom, rng)
        frames = run_one(start, params, sink, k, rng, recorder)
        if recorder is not None:
            for i, cfg in frames:
                recorder.add(i, cfg)
        acc = float(np.mean([r.accept for r in records]))
        log.info("chain %d: %d trajectories, acceptance %.3f", k, len(records), acc)
        obs_path = _chain_paths(args.obs, args.chains, k)
        out_path = _chain_paths(args.out, args.chains, k)
        if obs_path is not None:
            formats.write_observables(obs_path, records)
            write_manifest(obs_path, args, started, dict(extra or {}, chain=k))
        if out_path is not None:
            recorder.write(out_path)
            write_manifest(out_path, args, started, dict(extra or {}, chain=k))
        if obs_path is None and out_path is None:
            print(json.dumps({"chain": k, "acceptance": acc,
                              "avg_plaq": float(np.mean([r.avg_plaq for r in records]))}))
    return EXIT_OK


def _collect(run):
    """Wrap a chain runner so that it also returns (traj, physical config) pairs."""
    def one(start, params, sink, k, rng, recorder):
        frames = []

        def tap(rec_and_x):
            rec, x = rec_and_x
            sink(rec)
            if recorder is not None and rec.traj % recorder.every == 0:
                frames.append((rec.traj, x))
        run(start, params, tap, k, rng)
        return frames
    return one


# --------------------------------------------------------------- subcommands

def cmd_hmc(args) -> int:
    geom = _geometry(args)
    beta = lattice.Coupling(args.beta).beta

    def run(start, params, tap, k, rng):
        state = {"x": start}
        action = lambda x: lattice.wilson_action(x, beta)  # noqa: E731
        force = lambda x: lattice.action_gradient(x, beta)  # noqa: E731

        def measure(x):
            state["x"] = x
            return x
        hmc.run_markov_chain(start, action, force, params, lambda r: tap((r, state["x"].copy())),
                             measure, beta, chain_id=k, rng=rng)
    return _run_chains(args, geom, beta, _collect(run))


def _load_checkpoint(path):
    ckpt = formats.read_checkpoint(path)
    return ckpt, formats.file_sha256(path)


def cmd_fthmc(args) -> int:
    ckpt, digest = _load_checkpoint(args.checkpoint)
    meta = ckpt.meta or {}
    beta = args.beta if args.beta is not None else meta.get("beta")
    if beta is None:
        raise ConfigError("beta missing: pass --beta (checkpoint does not record one)")
    beta = lattice.Coupling(beta).beta
    args.beta = beta
    geom = _geometry(args, meta)
    args.lx, args.ly = geom.lx, geom.ly
    model = ckpt.model()
    model.check_geometry(geom.shape)

    def run(start, params, tap, k, rng):
        ctx = fthmc.EffectiveActionContext(model, beta)
        state = {}

        def measure(z):
            state["x"] = ctx.push(z)
            return state["x"]
        hmc.run_markov_chain(start, ctx.action, ctx.force, params, lambda r: tap((r, state["x"].copy())),
                             measure, beta, chain_id=k, rng=rng)
    return _run_chains(args, geom, beta, _collect(run), extra={"checkpoint_sha256": digest})


def cmd_train(args) -> int:
    started = _utc()
    geom = _geometry(args)
    cfg = training.TrainConfig(beta=args.beta, lx=geom.lx, ly=geom.ly, batch_size=args.batch_size,
                               n_epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
                               checkpoint_every=args.checkpoint_every, out_dir=args.out_dir,
                               eval_batch_size=args.eval_batch_size, clip_norm=args.clip_norm)
    arch = flow.Architecture(n_layers=args.n_layers, hidden=args.hidden, kernel_size=args.kernel_size)
    resume, digest = (None, None)
    if args.resume:
        resume, digest = _load_checkpoint(args.resume)
    model = flow.FlowModel.build(arch, seed=args.seed, final_scale=args.init_scale)
    out_dir = Path(args.out_dir)
    rows: list[training.TrainLogRow] = []

    def sink(row):
        rows.append(row)
        if row.epoch % max(1, args.epochs // 20) == 0:
            log.info("epoch %d loss %.4f ess %.4f", row.epoch, row.loss, row.ess)
    try:
        final, _ = training.train(cfg, model, resume=resume, log_sink=sink)
    except training.TrainingDivergedError as err:
        formats.write_checkpoint(out_dir / "checkpoint_last_good.lfck", err.last_good)
        formats.write_train_log(out_dir / "train_log.csv", rows)
        raise
    formats.write_train_log(out_dir / "train_log.csv", rows)
    ckpt_path = out_dir / "checkpoint_final.lfck"
    write_manifest(ckpt_path, args, started, {"resume_sha256": digest, "epochs_run": len(rows)})
    print(json.dumps({"checkpoint": str(ckpt_path), "epochs": final.epoch,
                      "final_loss": rows[-1].loss if rows else None,
                      "final_ess": rows[-1].ess if rows else None}))
    return EXIT_OK


def cmd_transfer(args) -> int:
    started = _utc()
    ckpt, digest = _load_checkpoint(args.checkpoint)
    geom = lattice.LatticeGeometry(args.lx, args.ly)
    model = training.transfer_weights(ckpt, geom)
    meta = dict(ckpt.meta or {})
    meta.update({"lx": geom.lx, "ly": geom.ly,
                 "transferred_from": {"lx": (ckpt.meta or {}).get("lx"), "ly": (ckpt.meta or {}).get("ly"),
                                      "sha256": digest}})
    out = training.Checkpoint(arch=ckpt.arch, params=model.params.values(), adam=ckpt.adam,
                              epoch=ckpt.epoch, meta=meta)
    formats.write_checkpoint(args.out, out)
    write_manifest(args.out, args, started, {"checkpoint_sha256": digest})
    return EXIT_OK


def cmd_exact(args) -> int:
    geom = _geometry(args)
    value = lattice.exact_average_plaquette(lattice.Coupling(args.beta), geom)
    print(f"{value:.15f}")
    return EXIT_OK


def _block_size(v: np.ndarray) -> int:
    try:
        tau = statistics.integrated_autocorrelation(v)
    except statistics.StatisticsDomainError:
        return 1
    return max(1, min(v.size // 20, int(math.ceil(4.0 * tau))))


def summarize(series: list[dict], beta=None, lx=None, ly=None, burn_in=0, block_size=0,
              n_boot=1000, seed=0, ess=None) -> dict:
    """Summary statistics pooled over chains (each chain burned in separately)."""
    chains = [{k: v[burn_in:] for k, v in s.items()} for s in series]
    chains = [c for c in chains if c["traj"].size]
    if not chains:
        raise statistics.StatisticsDomainError("no trajectories left after burn-in")
    flags: list[str] = []
    n = sum(c["traj"].size for c in chains)
    plaq = np.concatenate([c["avg_plaq"] for c in chains])
    acceptance = float(np.mean(np.concatenate([c["accept"] for c in chains])))

    blocks = []
    for c in chains:
        b = block_size or _block_size(c["avg_plaq"])
        v = c["avg_plaq"]
        nb = v.size // b
        if nb >= 1:
            blocks.append(v[: nb * b].reshape(nb, b).mean(axis=1))
    blocks = np.concatenate(blocks)
    avg_plaq_err = statistics.bootstrap_error(blocks, n_boot, seed) if blocks.size >= 2 else None

    taus, rates = [], []
    for c in chains:
        q = c["charge"]
        if q.size >= 2:
            rates.append((statistics.tunneling_rate(q), q.size - 1))
        try:
            taus.append(statistics.integrated_autocorrelation(q))
        except statistics.FrozenObservableError:
            flags.append("tau_int_Q: frozen observable")
        except statistics.StatisticsDomainError as err:
            flags.append(f"tau_int_Q: {err}")
    tau_q = float(np.mean(taus)) if taus and len(taus) == len(chains) else None
    rate = (sum(r * m for r, m in rates) / sum(m for _, m in rates)) if rates else None
    dh = np.concatenate([c["dH"] for c in chains])
    mean_edh, err_edh, ok = statistics.exp_delta_h_check(dh) if dh.size > 1 else (None, None, True)
    if not ok:
        flags.append("exp(-dH) deviates from 1 by more than 3 sigma")
    return {
        "beta": beta, "lx": lx, "ly": ly,
        "n_traj": int(n),
        "n_chains": len(chains),
        "acceptance": acceptance,
        "avg_plaq": float(np.mean(plaq)),
        "avg_plaq_err": avg_plaq_err,
        "tau_int_Q": tau_q,
        "tunneling_rate": rate,
        "distinct_Q": sorted({int(q) for c in chains for q in c["charge"]}),
        "exp_minus_dH": mean_edh,
        "exp_minus_dH_err": err_edh,
        "ess": ess,
        "flags": sorted(set(flags)),
    }


def _manifest_meta(path) -> dict:
    p = Path(str(path) + ".manifest.json")
    if not p.exists():
        return {}
    try:
        return json.loads(p.read_text(encoding="utf-8")).get("config", {})
    except (OSError, json.JSONDecodeError):
        return {}


def plot_histories(series: list[dict], path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_q, ax_p) = plt.subplots(1, 2, figsize=(10, 3.5))
    for k, s in enumerate(series):
        ax_q.plot(s["traj"], s["charge"], drawstyle="steps-post", lw=0.8, label=f"chain {k}")
        ax_p.plot(s["traj"], s["avg_plaq"], lw=0.5)
    ax_q.set_xlabel("trajectory")
    ax_q.set_ylabel("Q")
    ax_p.set_xlabel("trajectory")
    ax_p.set_ylabel("average plaquette")
    if len(series) > 1:
        ax_q.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_analyze(args) -> int:
    series = [formats.read_observables(p) for p in args.obs]
    meta = _manifest_meta(args.obs[0])
    beta = args.beta if args.beta is not None else meta.get("beta")
    lx = args.lx if args.lx is not None else meta.get("lx")
    ly = args.ly if args.ly is not None else meta.get("ly")
    ess = None
    if args.checkpoint:
        ckpt, _ = _load_checkpoint(args.checkpoint)
        if beta is None or lx is None:
            raise ConfigError("ESS needs beta and lattice size")
        geom = lattice.LatticeGeometry(int(lx), int(ly or lx))
        ws, _ = fthmc.flow_proposal_sampler(ckpt.model(), beta, args.ess_samples,
                                            np.random.default_rng(args.seed), geom)
        ess = statistics.effective_sample_size(ws)
    summary = summarize(series, beta, lx, ly, args.burn_in, args.block_size, args.n_boot, args.seed, ess)
    text = json.dumps(summary, indent=2, sort_keys=True)
    if args.summary:
        formats.write_json(args.summary, summary)
    else:
        print(text)
    if args.plot:
        plot_histories(series, args.plot)
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
        argv = manifest_argv(manifest)
    except (OSError, json.JSONDecodeError, KeyError) as err:
        raise formats.FormatError(f"{args.manifest}: not a run manifest ({err})") from err
    return main(argv)


COMMANDS = {
    "hmc": cmd_hmc, "train": cmd_train, "fthmc": cmd_fthmc, "transfer": cmd_transfer,
    "exact": cmd_exact, "analyze": cmd_analyze, "replay": cmd_replay,
}


def _fail(code: int, err: BaseException) -> int:
    print(f"u1flow: error: {err}", file=sys.stderr)
    print(f"error_code={code}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except ConfigError as err:
        return _fail(EXIT_CONFIG, err)
    except formats.FormatError as err:
        return _fail(EXIT_FORMAT, err)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.command](args)
    except (ConfigError, training.ArchitectureMismatchError, flow.FlowGeometryError) as err:
        return _fail(EXIT_CONFIG, err)
    except (formats.FormatError, FileNotFoundError, IsADirectoryError) as err:
        return _fail(EXIT_FORMAT, err)
    except (FloatingPointError, hmc.ChainAbortedError, statistics.StatisticsDomainError) as err:
        return _fail(EXIT_NUMERIC, err)
    except ValueError as err:
        return _fail(EXIT_CONFIG, err)
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
