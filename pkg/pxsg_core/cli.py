# Command-line surface: corpus synthesis, training, attacks, evaluation, the
# client-side encode/decode steps, the segmentation server and the experiment
# driver. Run as `python -m pxsg_core.cli <command> ...`.

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import uvicorn
from dotenv import load_dotenv

from . import initialize_proxy_system
from .checkpoint import load_checkpoint
from .constants import Ablations, Defaults
from .errors import ProxySegError
from .evaluation import (
    EvalReport,
    dsc_report,
    histogram_pair,
    items_from_corpus,
    pairwise_values,
    reid_attack,
    siamese_attack,
    summarize_attack,
)
from .experiments import run_experiments
from .networks import NetworkKinds
from .phantom import read_corpus, synthesize_corpus, write_corpus
from .protocol.client import client_decode, client_encode, load_flows, save_flows, segment_remote
from .protocol.server import serve
from .protocol.wire import ProxyRequest, new_request_id, seal
from .settings import EndpointConfig, PhantomSpec, TrainConfig, parse_listen
from .trainer import run
from .volume import PrivateKey, SegMap, Volume, read_sidecar, read_volume_file, write_volume_file

logger = logging.getLogger(__name__)


def _configure_logging() -> None:
    load_dotenv()
    logging.basicConfig(
        level=os.getenv("PXSG_LOG_LEVEL", "INFO").upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    )


def cmd_phantom(args) -> int:
    spec = PhantomSpec.from_file(args.spec) if args.spec else PhantomSpec()
    write_corpus(synthesize_corpus(spec, workers=args.workers), args.out)
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    config = config.with_ablations(args.ablate or [])
    generator = None
    if args.generator:
        generator, _ = load_checkpoint(args.generator, kind=NetworkKinds.GENERATOR)
    if args.freeze_generator:
        config = config.model_copy(update={"freeze_generator": True})
    test_corpus = read_corpus(args.test_corpus) if args.test_corpus else None
    result = run(config, read_corpus(args.corpus), args.out, test_corpus, generator=generator, resume=args.resume)
    logger.info(f"Training finished after {len(result.history)} epochs; checkpoints in {result.out_dir}")
    return 0


def cmd_attack(args) -> int:
    representation = args.representation or ("image" if args.similarity == "ms-ssim" else "segmap")
    gallery = items_from_corpus(read_corpus(args.gallery), representation)
    queries = items_from_corpus(read_corpus(args.queries), representation) if args.queries else None
    if args.similarity == "siamese" and not args.model:
        if queries is not None:
            raise ValueError("--queries needs a trained --model; an untrained attacker is scored on held-out gallery subjects")
        attacker_items = items_from_corpus(read_corpus(args.attacker_corpus), representation) if args.attacker_corpus else None
        result = siamese_attack(gallery, attacker_items, steps=args.attacker_steps, seed=args.seed, workers=args.workers)
    else:
        model = load_checkpoint(args.model, kind=NetworkKinds.DISCRIMINATOR)[0] if args.model else None
        result = reid_attack(gallery, queries, args.similarity, model, workers=args.workers)
    report = EvalReport(reid={representation: summarize_attack(result, representation)})
    if args.csv and args.similarity != "siamese":
        intra, inter = pairwise_values(gallery, args.similarity, args.workers)
        name = f"{representation}s"
        report.histograms[name] = histogram_pair(name, args.similarity, intra, inter)
        report.write_csv(args.csv)
    report.write_json(args.report)
    print(json.dumps(report.reid[representation].model_dump(), indent=2))
    return 0


def cmd_evaluate(args) -> int:
    truth_root, pred_root = Path(args.truth), Path(args.pred)
    truth_files = sorted(truth_root.rglob("*.seg"))
    if not truth_files:
        raise FileNotFoundError(f"no .seg files under {truth_root}")
    preds, truths = [], []
    for truth_path in truth_files:
        pred_path = pred_root / truth_path.relative_to(truth_root)
        if not pred_path.exists():
            raise FileNotFoundError(f"missing prediction {pred_path}")
        preds.append(read_volume_file(pred_path))
        truths.append(read_volume_file(truth_path))
    report = EvalReport(dsc=dsc_report(preds, truths))
    if args.report:
        report.write_json(args.report)
    print(json.dumps(report.dsc.model_dump(), indent=2))
    return 0


def cmd_encode(args) -> int:
    generator, _ = load_checkpoint(args.model, kind=NetworkKinds.GENERATOR)
    if args.key:
        key = PrivateKey.from_hex(args.key)
    else:
        key = PrivateKey.generate(generator.config.key_dim)
        if args.key_out:
            Path(args.key_out).write_text(key.to_hex() + "\n")
            os.chmod(args.key_out, 0o600)
    x = read_volume_file(args.input)
    if not isinstance(x, Volume):
        raise ValueError(f"{args.input} is not a scalar volume")
    encoded = client_encode(generator, x, key)
    write_volume_file(args.out, encoded.deformed.volume, {"request_id": encoded.request_id.hex()})
    save_flows(args.flow_out, encoded)
    logger.info(f"Wrote proxy volume {args.out} and flows {args.flow_out}")
    return 0


def cmd_serve(args) -> int:
    host, port = parse_listen(args.listen)
    config = EndpointConfig.from_env(segmenter_checkpoint=args.model, host=host, port=port)
    if args.http:
        os.environ["PXSG_SEGMENTER_CKPT"] = config.segmenter_checkpoint
        uvicorn.run("main:app", host=config.host, port=config.port)
        return 0
    config, networks = initialize_proxy_system(config)
    serve(networks[NetworkKinds.SEGMENTER], config)
    return 0


def cmd_segment_remote(args) -> int:
    x_d = read_volume_file(args.input)
    if not isinstance(x_d, Volume):
        raise ValueError(f"{args.input} is not a scalar volume")
    meta = read_sidecar(args.input) or {}
    request_id = bytes.fromhex(meta["request_id"]) if "request_id" in meta else new_request_id()
    response = segment_remote(args.server, ProxyRequest(request_id, seal(x_d)), timeout=args.timeout)
    write_volume_file(
        args.out,
        response.segmap,
        {"request_id": response.request_id.hex(), "model_version": response.model_version},
    )
    return 0


def cmd_decode(args) -> int:
    bundle = load_flows(args.flow)
    y_d = read_volume_file(args.input)
    if not isinstance(y_d, SegMap):
        raise ValueError(f"{args.input} is not a segmentation map")
    meta = read_sidecar(args.input) or {}
    if "request_id" in meta and meta["request_id"] != bundle.request_id.hex():
        raise ValueError(f"{args.input} answers a different request than {args.flow}")
    y = client_decode(bundle.inverse_flow, y_d, bundle.original_dims)
    write_volume_file(args.out, y, discrete=True)
    return 0


def cmd_experiment(args) -> int:
    base = TrainConfig.from_file(args.config) if args.config else None
    summary = run_experiments(
        read_corpus(args.corpus),
        args.out,
        epochs=args.epochs,
        seed=args.seed,
        base=base,
        transfer=not args.no_transfer,
        attacker_steps=args.attacker_steps,
    )
    print(json.dumps(summary["checks"], indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pxsg", description="Privacy-preserving proxy segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="synthesize a phantom corpus")
    p.add_argument("--spec", help="PhantomSpec JSON file (defaults when omitted)")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train", help="train G, S and D jointly")
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ablate", action="append", choices=Ablations.ALL)
    p.add_argument("--generator", help="pretrained generator checkpoint")
    p.add_argument("--freeze-generator", action="store_true")
    p.add_argument("--resume", help="state.pt of an interrupted run")
    p.add_argument("--test-corpus", help="held-out corpus evaluated after training")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="re-identification attack on a corpus")
    p.add_argument("--gallery", required=True)
    p.add_argument("--queries")
    p.add_argument("--similarity", choices=("ms-ssim", "dice", "siamese"), default="ms-ssim")
    p.add_argument("--representation", choices=("image", "segmap"))
    p.add_argument("--model", help="discriminator checkpoint for the siamese attacker")
    p.add_argument("--attacker-steps", type=int, default=Defaults.ATTACKER_STEPS)
    p.add_argument("--attacker-corpus", help="labelled corpus the siamese attacker trains on (default: half the gallery subjects)")
    p.add_argument("--report", required=True)
    p.add_argument("--csv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=4)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="segmentation Dice of predictions against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("encode", help="client: warp a volume under a private key")
    p.add_argument("--model", required=True)
    keys = p.add_mutually_exclusive_group(required=True)
    keys.add_argument("--key", help="key as hex-encoded little-endian float32")
    keys.add_argument("--keygen", action="store_true")
    p.add_argument("--key-out", help="where to store a generated key")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--flow-out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("serve", help="run the segmentation server")
    p.add_argument("--model", required=True)
    p.add_argument("--listen", default=os.getenv("PXSG_LISTEN", Defaults.LISTEN))
    p.add_argument("--http", action="store_true", help="serve the HTTP face instead of raw TCP")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("segment-remote", help="client: send a proxy volume to the server")
    p.add_argument("--server", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--timeout", type=float, default=Defaults.READ_TIMEOUT)
    p.set_defaults(func=cmd_segment_remote)

    p = sub.add_parser("decode", help="client: unwarp the returned segmentation")
    p.add_argument("--flow", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("experiment", help="baseline, full system, ablations and transfer")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="base TrainConfig JSON file")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--attacker-steps", type=int, default=Defaults.ATTACKER_STEPS)
    p.add_argument("--no-transfer", action="store_true")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    _configure_logging()
    try:
        return args.func(args)
    except (ProxySegError, ValueError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
