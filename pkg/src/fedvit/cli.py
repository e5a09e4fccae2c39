"""
fedvit.cli

Command line entry point::

    fedvit keygen --seed 42 --out shared.fvk
    fedvit train --config run.toml --mode encrypted --key shared.fvk \\
        --out-dir runs/enc
    fedvit eval --model runs/enc/model.fvw --data run.toml
    fedvit attack --config run.toml --live --sample-index 3 --out-dir atk
    fedvit compare --config run.toml --key shared.fvk

Exit codes: 0 success, 2 usage or configuration error, 3 aborted run.
"""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from . import __version__
from .attack import AttackComparison, evaluate_attack
from .codec import FrameError
from .config import (
    Mode,
    RunConfig,
    TransportKind,
    as_dict,
    load_config,
    parse_config,
)
from .crypto import SecretKey, decrypt_model, keygen
from .data import (
    Dataset,
    DatasetFormatError,
    load_datasets,
    partition_random,
    write_image,
)
from .errors import ConfigError, FedVitError, ShapeError
from .federation import (
    AbortedRun,
    ClientNode,
    ClientState,
    LocalTraining,
    RoundRecord,
    ServerNode,
    ServerState,
    SimulationResult,
    initial_model,
    run_simulation,
)
from .model import (
    GradientUpdate,
    ModelParams,
    evaluate_accuracy,
    init_params,
)
from .numerics import Rng
from .secrets import compare_fingerprints, generate_seed
from .serializers import load_key, load_model, save_key, save_model
from .transport import (
    RoundMessage,
    TransportError,
    decode,
    encode,
    socket_connect,
    socket_listen,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ABORTED = 3

MANIFEST = "manifest.json"
METRICS = "metrics.csv"
MODEL = "model.fvw"

USAGE_ERRORS = (
    ConfigError,
    ShapeError,
    DatasetFormatError,
    FrameError,
    OSError,
    ValueError,
)
RUNTIME_ERRORS = (AbortedRun, TransportError)


class UsageError(FedVitError):
    """A command was invoked with missing or conflicting inputs."""


def format_accuracy(accuracy: Optional[float]) -> str:
    return "n/a" if accuracy is None else f"{accuracy:.2f}"


def _config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides: Dict[str, Any] = {"mode": getattr(args, "mode", None)}
    transport = getattr(args, "transport", None)
    if transport:
        overrides["transport"] = {"kind": transport}
    return cfg.with_overrides(**overrides)


def _key(
    cfg: RunConfig, path: Optional[str], *, required: bool
) -> Optional[SecretKey]:
    path = path or cfg.key
    if path is None:
        if required:
            raise UsageError(
                "Encrypted mode needs the shared key: pass --key or set key "
                "in the config"
            )
        return None
    key = load_key(path)
    if (key.patch_dim, key.num_patches) != (
        cfg.model.patch_dim,
        cfg.model.num_patches,
    ):
        raise ShapeError(
            "Key does not fit the model config",
            shapes=[
                (key.patch_dim, key.num_patches),
                (cfg.model.patch_dim, cfg.model.num_patches),
            ],
        )
    return key


def write_metrics(path: Path, records: Sequence[RoundRecord], clients: int):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(
            ["round"]
            + [f"client_{i}_loss" for i in range(clients)]
            + ["accuracy"]
        )
        for record in records:
            writer.writerow(
                [record.round]
                + [repr(loss) for loss in record.client_losses]
                + [format_accuracy(record.accuracy)]
            )
    logger.info("Wrote %s", path)


def write_manifest(
    out_dir: Path,
    cfg: RunConfig,
    records: Sequence[RoundRecord],
    *,
    status: str,
    key: Optional[SecretKey],
    artifacts: Dict[str, Optional[str]],
    last_round: Optional[int] = None,
):
    if last_round is None:
        last_round = records[-1].round if records else 0
    manifest = {
        "fedvit_version": __version__,
        "config": as_dict(cfg),
        "seed": cfg.seed,
        "mode": cfg.mode.value,
        "strategy": cfg.strategy.value,
        "status": status,
        "last_round": last_round,
        "rounds": [
            {
                "round": record.round,
                "client_losses": list(record.client_losses),
                "accuracy": record.accuracy,
                "wall_time": record.wall_time,
            }
            for record in records
        ],
        "final_accuracy": format_accuracy(
            records[-1].accuracy if records else None
        ),
        "key_id": None if key is None else f"{key.key_id:016x}",
        "artifacts": artifacts,
    }
    path = out_dir / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    logger.info("Wrote %s", path)


def cmd_keygen(args: argparse.Namespace) -> int:
    cfg = _config(args)
    seed = generate_seed() if args.seed is None else args.seed
    key = keygen(seed, cfg.model.patch_dim, cfg.model.num_patches)
    save_key(key, args.out)
    print(f"{key.key_id:016x}")
    return EXIT_OK


def _train_local(
    args: argparse.Namespace, cfg: RunConfig, key: Optional[SecretKey]
) -> int:
    out_dir = Path(args.out_dir)
    artifacts: Dict[str, Optional[str]] = {"metrics": METRICS, "model": None}
    try:
        result: SimulationResult = run_simulation(cfg, key=key)
    except AbortedRun as exc:
        write_manifest(
            out_dir,
            cfg,
            exc.records,
            status="aborted",
            key=key,
            artifacts=artifacts,
            last_round=exc.last_round,
        )
        raise
    save_model(cfg.model, result.final, out_dir / MODEL)
    artifacts["model"] = MODEL
    write_metrics(out_dir / METRICS, result.records, cfg.clients)
    write_manifest(
        out_dir,
        cfg,
        result.records,
        status="complete",
        key=key,
        artifacts=artifacts,
    )
    print(f"final accuracy {format_accuracy(result.final_accuracy)}%")
    return EXIT_OK


def _initial_global(
    args: argparse.Namespace, cfg: RunConfig, key: Optional[SecretKey]
) -> ModelParams:
    """
    The server starts from a model the initializer prepared. Without one it
    can only create the starting model itself when it may see it: in plain
    mode, or when the operator hands it the key.
    """
    if args.initial_model:
        model_cfg, params = load_model(args.initial_model)
        if model_cfg != cfg.model:
            raise ConfigError(
                "initial model does not match the model config", key="model"
            )
        if params.encrypted != (cfg.mode is Mode.ENCRYPTED):
            raise UsageError(
                f"{args.initial_model} is not in {cfg.mode.value} form"
            )
        return params
    if cfg.mode is Mode.ENCRYPTED and key is None:
        raise UsageError(
            "An encrypted server needs --initial-model from `fedvit init`"
        )
    return initial_model(cfg.model, cfg.seed, key)


def cmd_init(args: argparse.Namespace) -> int:
    """Initializer role: write the starting global model."""
    cfg = _config(args)
    key = _key(cfg, args.key, required=cfg.mode is Mode.ENCRYPTED)
    if cfg.mode is Mode.PLAIN:
        key = None
    save_model(cfg.model, initial_model(cfg.model, cfg.seed, key), args.out)
    return EXIT_OK


def _train_server(
    args: argparse.Namespace, cfg: RunConfig, key: Optional[SecretKey]
) -> int:
    out_dir = Path(args.out_dir)
    _, test = load_datasets(cfg)
    timeout = cfg.transport.timeout
    records: List[RoundRecord] = []

    def on_round(state: ServerState, losses: Tuple[float, ...]):
        accuracy = None
        params = state.global_model
        if key is not None:
            params = decrypt_model(params, key)
        if not params.encrypted:
            accuracy = evaluate_accuracy(test.samples, params, cfg.model)
        records.append(RoundRecord(state.round, losses, accuracy, 0.0))

    state = ServerState(
        global_model=_initial_global(args, cfg, key),
        strategy=cfg.strategy,
        lr=cfg.lr,
        expected_clients=cfg.clients,
    )
    address = args.address or cfg.transport.address
    endpoints = []
    with socket_listen(address) as listener:
        try:
            endpoints = [
                listener.accept(timeout) for _ in range(cfg.clients)
            ]
            server = ServerNode(
                state, endpoints, timeout=timeout, on_round=on_round
            )
            final = server.run(cfg.rounds)
        except (TransportError, FedVitError) as exc:
            write_manifest(
                out_dir,
                cfg,
                records,
                status="aborted",
                key=key,
                artifacts={"metrics": None, "model": None},
            )
            raise AbortedRun(
                str(exc), last_round=len(records), records=records
            ) from exc
        finally:
            for endpoint in endpoints:
                endpoint.close()
    save_model(cfg.model, final.global_model, out_dir / MODEL)
    write_metrics(out_dir / METRICS, records, cfg.clients)
    write_manifest(
        out_dir,
        cfg,
        records,
        status="complete",
        key=key,
        artifacts={"metrics": METRICS, "model": MODEL},
    )
    return EXIT_OK


def _train_client(
    args: argparse.Namespace, cfg: RunConfig, key: Optional[SecretKey]
) -> int:
    if args.client_id is None:
        raise UsageError("--role client needs --client-id")
    if not 0 <= args.client_id < cfg.clients:
        raise UsageError(f"--client-id must be in [0, {cfg.clients})")
    train, _ = load_datasets(cfg)
    per_client = cfg.data.per_client or len(train) // cfg.clients
    partition = partition_random(train, cfg.clients, per_client, cfg.seed)
    state = ClientState(
        client_id=args.client_id,
        cfg=cfg.model,
        local=init_params(cfg.model, Rng(cfg.seed, "model/init")),
        data=partition.samples(train, args.client_id),
        training=LocalTraining(
            strategy=cfg.strategy,
            lr=cfg.lr,
            local_epochs=cfg.local_epochs,
            batch_size=cfg.batch_size,
            seed=cfg.seed,
        ),
        key=key,
    )
    address = args.address or cfg.transport.address
    timeout = cfg.transport.timeout
    try:
        endpoint = socket_connect(address, timeout=timeout, attempts=50)
        final = ClientNode(state, endpoint, timeout=timeout).run()
    except (TransportError, FedVitError) as exc:
        write_manifest(
            Path(args.out_dir),
            cfg,
            (),
            status="aborted",
            key=key,
            artifacts={"model": None},
            last_round=state.round,
        )
        raise AbortedRun(str(exc), last_round=state.round) from exc
    if args.client_id == 0:
        save_model(cfg.model, final, Path(args.out_dir) / MODEL)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config(args)
    if args.role != "local" and cfg.transport.kind is not TransportKind.SOCKET:
        cfg = cfg.with_overrides(transport={"kind": "socket"})
    encrypted = cfg.mode is Mode.ENCRYPTED
    key = _key(cfg, args.key, required=encrypted and args.role != "server")
    if not encrypted:
        key = None
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    if args.role == "server":
        return _train_server(args, cfg, key)
    if args.role == "client":
        return _train_client(args, cfg, key)
    return _train_local(args, cfg, key)


def _wire_trip(grad: GradientUpdate) -> GradientUpdate:
    """The gradient as an observer of the encoded frame sees it."""
    return decode(encode(RoundMessage.for_gradient(grad))).gradient()


def _victim_model(
    args: argparse.Namespace, cfg: RunConfig
) -> Tuple[RunConfig, ModelParams]:
    if args.gradients_from_run is None:
        return cfg, init_params(cfg.model, Rng(cfg.seed, "model/init"))
    run_dir = Path(args.gradients_from_run)
    model_cfg, params = load_model(run_dir / MODEL)
    if params.encrypted:
        raise UsageError(f"{run_dir / MODEL} holds an encrypted model")
    if not args.config:
        manifest = json.loads((run_dir / MANIFEST).read_text())
        cfg = parse_config(manifest["config"])
    return cfg.with_overrides(model=as_dict(model_cfg)), params


def _check_run_key(run_dir: Path, key: SecretKey):
    """A key handed to the attack must be the one the run trained under."""
    path = run_dir / MANIFEST
    if not path.exists():
        return
    key_id = json.loads(path.read_text()).get("key_id")
    if key_id is not None and not compare_fingerprints(
        int(key_id, 16), key.key_id
    ):
        raise UsageError(
            f"{run_dir} was trained under key {key_id}, "
            f"not {key.key_id:016x}"
        )


def format_report(comparisons: Sequence[AttackComparison], index: int) -> str:
    lines = []
    for comparison in comparisons:
        lines.append(
            f"sample {index} label {comparison.sample.label} "
            f"baseline_psnr={comparison.baseline_psnr:.2f} dB"
        )
        for name, result in comparison.cases().items():
            lines.append(f"  {name}: {result.describe()}")
    return "\n".join(lines) + "\n"


def cmd_attack(args: argparse.Namespace) -> int:
    cfg, params = _victim_model(args, _config(args))
    train, _ = load_datasets(cfg)
    if not 0 <= args.sample_index < len(train):
        raise UsageError(
            f"--sample-index must be in [0, {len(train)}) for this dataset"
        )
    sample = train[args.sample_index]
    key = _key(cfg, args.key, required=False)
    if key is not None and args.gradients_from_run is not None:
        _check_run_key(Path(args.gradients_from_run), key)
    decrypt = key is not None
    if key is None:
        # the attacker never learns this key
        key = keygen(
            generate_seed(), cfg.model.patch_dim, cfg.model.num_patches
        )
    (comparison,) = evaluate_attack(
        [sample], params, cfg.model, key, decrypt=decrypt, observe=_wire_trip
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suffix = "ppm" if cfg.model.channels == 3 else "pgm"
    write_image(sample, out_dir / f"original.{suffix}")
    for name, result in comparison.cases().items():
        if result.reconstructed is not None:
            path = out_dir / f"reconstructed_{name}.{suffix}"
            write_image(result.reconstructed, path)
    report = format_report([comparison], args.sample_index)
    (out_dir / "report.txt").write_text(report)
    sys.stdout.write(report)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model_cfg, params = load_model(args.model)
    if params.encrypted:
        raise UsageError(f"{args.model} holds an encrypted model")
    cfg = load_config(args.data) if args.data else RunConfig()
    cfg = cfg.with_overrides(model=as_dict(model_cfg))
    _, test = load_datasets(cfg)
    test.check_config(model_cfg)
    accuracy = evaluate_accuracy(test.samples, params, model_cfg)
    print(f"{format_accuracy(accuracy)}%")
    return EXIT_OK


def compare_runs(
    cfg: RunConfig, key: SecretKey, train: Dataset, test: Dataset
) -> Tuple[SimulationResult, SimulationResult]:
    plain = run_simulation(
        cfg.with_overrides(mode=Mode.PLAIN), train=train, test=test
    )
    encrypted = run_simulation(
        cfg.with_overrides(mode=Mode.ENCRYPTED),
        key=key,
        train=train,
        test=test,
    )
    return plain, encrypted


def max_loss_deviation(a: SimulationResult, b: SimulationResult) -> float:
    deviations = [
        abs(x - y)
        for ra, rb in zip(a.records, b.records)
        for x, y in zip(ra.client_losses, rb.client_losses)
    ]
    return max(deviations, default=0.0)


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _config(args)
    key = _key(cfg, args.key, required=False)
    if key is None:
        key = keygen(cfg.seed, cfg.model.patch_dim, cfg.model.num_patches)
    train, test = load_datasets(cfg)
    plain, encrypted = compare_runs(cfg, key, train, test)
    plain_text = format_accuracy(plain.final_accuracy)
    encrypted_text = format_accuracy(encrypted.final_accuracy)
    print(f"{'':<10}{'w/o encryption':>16}{'w/ encryption':>16}")
    print(f"{'accuracy':<10}{plain_text:>16}{encrypted_text:>16}")
    print(f"max loss deviation {max_loss_deviation(plain, encrypted):.3g}")
    return EXIT_OK if plain_text == encrypted_text else EXIT_ABORTED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedvit",
        description="Federated learning with encrypted ViT embeddings.",
    )
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true")
    verbosity.add_argument("-q", "--quiet", action="store_true")
    commands = parser.add_subparsers(dest="command", required=True)

    keygen_parser = commands.add_parser("keygen", help="generate a key file")
    keygen_parser.add_argument("--seed", type=int)
    keygen_parser.add_argument("--out", required=True)
    keygen_parser.add_argument(
        "--config", "--model-config", dest="config", help="run config TOML"
    )
    keygen_parser.set_defaults(handler=cmd_keygen)

    init_parser = commands.add_parser(
        "init", help="write the initial global model"
    )
    init_parser.add_argument("--config")
    init_parser.add_argument("--mode", choices=[m.value for m in Mode])
    init_parser.add_argument("--key")
    init_parser.add_argument("--out", required=True)
    init_parser.set_defaults(handler=cmd_init)

    train_parser = commands.add_parser("train", help="run federated training")
    train_parser.add_argument("--config")
    train_parser.add_argument("--mode", choices=[m.value for m in Mode])
    train_parser.add_argument(
        "--transport", choices=[k.value for k in TransportKind]
    )
    train_parser.add_argument("--key")
    train_parser.add_argument("--out-dir", required=True)
    train_parser.add_argument(
        "--role", choices=["local", "server", "client"], default="local"
    )
    train_parser.add_argument("--client-id", type=int)
    train_parser.add_argument("--address", help="host:port")
    train_parser.add_argument(
        "--initial-model", help="FVW1 file written by `fedvit init`"
    )
    train_parser.set_defaults(handler=cmd_train)

    attack_parser = commands.add_parser(
        "attack", help="invert a single image gradient"
    )
    attack_parser.add_argument("--config")
    source = attack_parser.add_mutually_exclusive_group()
    source.add_argument("--gradients-from-run", metavar="RUN_DIR")
    source.add_argument("--live", action="store_true")
    attack_parser.add_argument("--sample-index", type=int, default=0)
    attack_parser.add_argument("--key")
    attack_parser.add_argument("--out-dir", required=True)
    attack_parser.set_defaults(handler=cmd_attack)

    eval_parser = commands.add_parser("eval", help="test set accuracy")
    eval_parser.add_argument("--model", required=True)
    eval_parser.add_argument("--data", help="run config TOML")
    eval_parser.set_defaults(handler=cmd_eval)

    compare_parser = commands.add_parser(
        "compare", help="plain and encrypted runs side by side"
    )
    compare_parser.add_argument("--config")
    compare_parser.add_argument(
        "--transport", choices=[k.value for k in TransportKind]
    )
    compare_parser.add_argument("--key")
    compare_parser.set_defaults(handler=cmd_compare)
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.WARNING
    if verbose:
        level = logging.DEBUG
    elif quiet:
        level = logging.ERROR
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        return args.handler(args)
    except RUNTIME_ERRORS as exc:
        logger.error("%s", exc)
        print(f"fedvit: error: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except (UsageError,) + USAGE_ERRORS as exc:
        logger.debug("Usage error", exc_info=True)
        print(f"fedvit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FedVitError as exc:
        logger.debug("Run failed", exc_info=True)
        print(f"fedvit: error: {exc}", file=sys.stderr)
        return EXIT_ABORTED
