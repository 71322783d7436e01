"""Command-line front end.

Subcommands cover the whole surface: key material (``keygen``,
``ceremony``), the encrypted-inference pipeline (``encrypt-image``,
``infer``, ``decrypt-result``), the federated stack (``fed-server``,
``fed-client``, ``fed-sim``), and measurement (``bench``, ``verify``).

Encryption and decryption are separate commands on purpose: ``infer``
evaluates the model without ever printing a plaintext, and only
``decrypt-result`` (which holds the key file) recovers logits.

Exit codes: 0 success, 2 usage error, 3 cryptographic or protocol
failure, 4 multiplicative budget exhausted.  Errors print one JSON line
on stderr so scripts can parse them.
"""

from __future__ import annotations

import argparse
import json
import os
import struct
import sys
import time
from random import Random

import numpy as np

from . import paillier
from . import threshold_paillier as tp
from .ckks import CkksContext, CkksParams, dump_vector, load_vector
from .errors import BudgetExhausted, HegemonyError
from .fedsim import FedConfig, connect, file_replay_provider, run_simulation, serve
from .he_backend import SimParams, SimulatorContext
from .model import (
    depth_required,
    encode_image_rows,
    infer_encrypted,
    load_image,
    load_model,
    make_demo_spec,
    read_logits,
    required_rotation_steps,
)

__all__ = ["main"]

_IMG_MAGIC = b"HEI1"


def _warn_seeded_keygen(seed) -> None:
    if seed is not None:
        print(
            json.dumps({"warning": "keys derived from a fixed seed are for demos only"}),
            file=sys.stderr,
        )


def _emit(obj: dict, as_json: bool) -> None:
    if as_json:
        print(json.dumps(obj))
    else:
        for k, v in obj.items():
            print(f"{k}: {v}")


def _thread_count(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    env = os.environ.get("HEGEMONY_THREADS")
    return int(env) if env else 1


# -- key files ---------------------------------------------------------

def _write_ckks_key(path: str, params: CkksParams, seed: int, steps: set[int]) -> None:
    with open(path, "w") as fh:
        json.dump(
            {"kind": "ckks", "params": params.to_json_obj(), "seed": seed, "rotation_steps": sorted(steps)},
            fh,
        )


def _load_ckks_context(path: str) -> CkksContext:
    with open(path) as fh:
        obj = json.load(fh)
    if obj.get("kind") != "ckks":
        raise HegemonyError(f"{path} is not a lattice key file")
    params = CkksParams.from_json_obj(obj["params"])
    return CkksContext(params, rotation_steps=obj["rotation_steps"], seed=obj["seed"])


def _load_spec(arg: str, *, size: int, seed: int):
    if arg.startswith("demo:"):
        arch = arg.split(":", 1)[1]
        return make_demo_spec(arch, size=size, seed=seed)
    return load_model(arg)


# -- subcommand bodies -------------------------------------------------

def cmd_keygen(args) -> int:
    _warn_seeded_keygen(args.seed)
    os.makedirs(args.out, exist_ok=True)
    if args.kind == "paillier":
        rng = Random(args.seed) if args.seed is not None else None
        pub, sec = paillier.keygen(args.bits // 2, rng)
        with open(os.path.join(args.out, "paillier_pub.json"), "w") as fh:
            fh.write(pub.to_json())
        with open(os.path.join(args.out, "paillier_sec.json"), "w") as fh:
            fh.write(sec.to_json())
        _emit({"kind": "paillier", "bits": pub.n.bit_length(), "out": args.out}, args.json)
        return 0
    # lattice keys: the model geometry decides which rotation steps need keys
    seed = args.seed if args.seed is not None else int.from_bytes(os.urandom(6), "big")
    spec = _load_spec(args.weights, size=args.size, seed=0)
    levels = args.budget or depth_required(spec)
    params = CkksParams(degree=args.degree, levels=levels)
    steps = required_rotation_steps(spec, params.slot_count)
    t0 = time.perf_counter()
    ctx = CkksContext(params, rotation_steps=steps, seed=seed)
    path = os.path.join(args.out, "ckks_key.json")
    _write_ckks_key(path, params, seed, steps)
    _emit(
        {
            "kind": "ckks",
            "degree": params.degree,
            "levels": levels,
            "rotation_steps": len(steps),
            "fingerprint": ctx.fingerprint(),
            "setup_seconds": round(time.perf_counter() - t0, 2),
            "key_file": path,
        },
        args.json,
    )
    return 0


def cmd_ceremony(args) -> int:
    _warn_seeded_keygen(args.seed)
    os.makedirs(args.out, exist_ok=True)
    rng = Random(args.seed) if args.seed is not None else None
    t0 = time.perf_counter()
    pub, shares = tp.ceremony_keygen(args.bits // 2, args.shares, rng)
    with open(os.path.join(args.out, "threshold_pub.json"), "w") as fh:
        fh.write(pub.to_json())
    for sh in shares:
        with open(os.path.join(args.out, f"share_{sh.index}.json"), "w") as fh:
            fh.write(sh.to_json())
    _emit(
        {
            "shares": args.shares,
            "modulus_bits": pub.n.bit_length(),
            "ceremony_id": pub.ceremony_id,
            "seconds": round(time.perf_counter() - t0, 2),
            "out": args.out,
        },
        args.json,
    )
    return 0


def cmd_encrypt_image(args) -> int:
    img = load_image(args.image)
    if args.backend == "sim":
        sim_payload = {
            "backend": "sim",
            "height": img.shape[0],
            "width": img.shape[1],
            "channels": img.shape[2],
            "rows": [img[i].T.ravel().tolist() for i in range(img.shape[0])],
        }
        with open(args.out, "w") as fh:
            json.dump(sim_payload, fh)
        _emit({"backend": "sim", "rows": img.shape[0], "out": args.out}, args.json)
        return 0
    ctx = _load_ckks_context(args.keys)
    enc = encode_image_rows(ctx, img)
    with open(args.out, "wb") as fh:
        header = json.dumps(
            {"height": enc.height, "width": enc.width, "channels": enc.channels}
        ).encode()
        fh.write(_IMG_MAGIC + struct.pack("<I", len(header)) + header)
        for row in enc.rows:
            blob = dump_vector(ctx, row)
            fh.write(struct.pack("<I", len(blob)) + blob)
    _emit({"backend": "ckks", "rows": enc.height, "out": args.out}, args.json)
    return 0


def _read_image_container(path: str, ctx: CkksContext):
    from .enc_tensor import EncImage

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _IMG_MAGIC:
        raise HegemonyError(f"{path} is not an encrypted image container")
    (hlen,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + hlen])
    off = 8 + hlen
    rows = []
    for _ in range(header["height"]):
        (blen,) = struct.unpack("<I", data[off : off + 4])
        off += 4
        rows.append(load_vector(ctx, data[off : off + blen]))
        off += blen
    return EncImage(
        rows=rows, height=header["height"], width=header["width"], channels=header["channels"]
    )


def cmd_infer(args) -> int:
    timings: list[tuple[str, float]] = []
    if args.backend == "sim":
        with open(args.input) as fh:
            payload = json.load(fh)
        if payload.get("backend") != "sim":
            raise HegemonyError("--backend sim needs an encrypt-image --backend sim input")
        h, w, c = payload["height"], payload["width"], payload["channels"]
        spec = _load_spec(args.weights, size=w, seed=args.seed or 0)
        ctx = SimulatorContext(SimParams(slot_count=4096, budget=depth_required(spec)))
        from .enc_tensor import EncImage

        enc = EncImage(
            rows=[ctx.encrypt_vec(np.array(r)) for r in payload["rows"]],
            height=h, width=w, channels=c,
        )
        out = infer_encrypted(ctx, spec, enc, timings=timings)
        result = {
            "backend": "sim",
            "slots": ctx.decrypt_vec(out, ctx.secret).tolist(),
            "valid": sorted(out.layout.valid),
            "pending_scale": out.layout.pending_scale,
        }
        with open(args.out, "w") as fh:
            json.dump(result, fh)
    else:
        ctx = _load_ckks_context(args.keys)
        enc = _read_image_container(args.input, ctx)
        spec = _load_spec(args.weights, size=enc.width, seed=args.seed or 0)
        out = infer_encrypted(ctx, spec, enc, timings=timings)
        with open(args.out, "wb") as fh:
            fh.write(dump_vector(ctx, out))
    _emit(
        {
            "backend": args.backend,
            "out": args.out,
            "total_seconds": round(sum(s for _, s in timings), 3),
            "layers": {tag: round(s, 3) for tag, s in timings},
        },
        args.json,
    )
    return 0


def cmd_decrypt_result(args) -> int:
    head = open(args.input, "rb").read(4)
    if head == b"HEV1":
        ctx = _load_ckks_context(args.keys)
        with open(args.input, "rb") as fh:
            vec = load_vector(ctx, fh.read())
        logits = read_logits(ctx, vec, ctx.secret)
    else:
        with open(args.input) as fh:
            payload = json.load(fh)
        if payload.get("backend") != "sim":
            raise HegemonyError(f"{args.input} is neither a lattice result nor a simulator result")
        slots = np.array(payload["slots"])
        logits = slots[payload["valid"]] * payload["pending_scale"]
    _emit(
        {"logits": [round(float(v), 6) for v in logits], "argmax": int(np.argmax(logits))},
        args.json,
    )
    return 0


def cmd_fed_server(args) -> int:
    with open(args.pub) as fh:
        pub = tp.ThresholdPublicKey.from_json(fh.read())
    config = FedConfig(
        clients=args.clients,
        rounds=args.rounds,
        key_bits=pub.n.bit_length(),
        n_weights=args.n_weights,
        seed=args.seed,
        phase_timeout=args.timeout,
    )
    host, port = args.listen.rsplit(":", 1)
    transcript = serve((host, int(port)), config, pub)
    for line in transcript.to_json_lines():
        print(line)
    return 0


def cmd_fed_client(args) -> int:
    host, port = args.connect.rsplit(":", 1)
    provider = file_replay_provider(args.weights_dir) if args.weights_dir else None
    session = connect(
        (host, int(port)),
        args.share,
        args.client_id,
        update_provider=provider,
        threads=_thread_count(args),
        timeout=args.timeout,
    )
    if session.error:
        raise HegemonyError(session.error)
    _emit({"client": args.client_id, "rounds": len(session.checksums), "checksums": session.checksums}, args.json)
    return 0


def cmd_fed_sim(args) -> int:
    from .errors import RoundAbort
    from .report import render_fed_png, write_fed_jsonl

    config = FedConfig(
        clients=args.clients,
        rounds=args.rounds,
        key_bits=args.key_bits,
        n_weights=args.n_weights,
        threads=_thread_count(args),
        seed=args.seed,
    )
    provider = file_replay_provider(args.weights_dir) if args.weights_dir else None
    os.makedirs(args.out_dir, exist_ok=True)
    code = 0
    try:
        transcript = run_simulation(config, provider)
    except RoundAbort as abort:
        transcript = abort.transcript
        code = 3
    lines = transcript.to_json_lines()
    jsonl = os.path.join(args.out_dir, "fed_transcript.jsonl")
    png = os.path.join(args.out_dir, "fed_phases.png")
    write_fed_jsonl(lines, jsonl)
    render_fed_png(transcript, png)
    for line in lines:
        print(line)
    print(json.dumps({"jsonl": jsonl, "figure": png}))
    return code


def cmd_bench(args) -> int:
    from .report import render_bench_png, write_bench_csv

    archs = [f"{args.layers}conv"] if args.layers else ["2conv", "3conv"]
    os.makedirs(args.out_dir, exist_ok=True)
    rows = []
    totals = {}
    cpu_totals = {}
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    img = rng.uniform(0, 1, (args.size, args.size, 1))
    for arch in archs:
        spec = make_demo_spec(arch, size=args.size, seed=args.seed or 0)
        depth = depth_required(spec)
        timings: list[tuple[str, float]] = []
        if args.backend == "ckks":
            params = CkksParams(degree=args.degree, levels=depth)
            backend = CkksContext(
                params, rotation_steps=required_rotation_steps(spec, params.slot_count),
                seed=args.seed if args.seed is not None else 0,
            )
        else:
            backend = SimulatorContext(SimParams(slot_count=4096, budget=depth))
        enc = encode_image_rows(backend, img)
        cpu0 = time.process_time()
        infer_encrypted(backend, spec, enc, timings=timings)
        cpu_totals[arch] = time.process_time() - cpu0
        for tag, seconds in timings:
            rows.append(
                {"arch": arch, "size": args.size, "backend": args.backend, "layer": tag,
                 "seconds": round(seconds, 4)}
            )
        totals[arch] = sum(s for _, s in timings)
        del backend
    csv_path = os.path.join(args.out_dir, "bench.csv")
    png_path = os.path.join(args.out_dir, "bench.png")
    write_bench_csv(rows, csv_path)
    render_bench_png(rows, png_path)
    out = {
        "totals_seconds": {k: round(v, 2) for k, v in totals.items()},
        "totals_cpu_seconds": {k: round(v, 2) for k, v in cpu_totals.items()},
        "csv": csv_path,
        "figure": png_path,
    }
    if len(archs) == 2:
        # compare compute, not wall clock: a busy host can stall either arch
        grows = cpu_totals["3conv"] > cpu_totals["2conv"]
        out["deeper_is_slower"] = grows
        _emit(out, args.json)
        if not grows:
            raise HegemonyError("expected the deeper model to cost more time")
    else:
        _emit(out, args.json)
    return 0


def cmd_verify(args) -> int:
    from .acceptance import run_suite

    results = run_suite(args.suite)
    width = max(len(r.name) for r in results)
    failed = 0
    for r in results:
        if args.json:
            print(json.dumps({"check": r.name, "passed": r.passed, "seconds": round(r.seconds, 2), "detail": r.detail}))
        else:
            mark = "PASS" if r.passed else "FAIL"
            print(f"{mark}  {r.name:<{width}}  {r.seconds:7.1f}s  {r.detail}")
        failed += 0 if r.passed else 1
    if failed:
        raise HegemonyError(f"{failed} of {len(results)} checks failed")
    return 0


# -- argument wiring ---------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hegemony",
        description="Encrypted CNN inference and threshold-key federated averaging.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="reproducible randomness")
        p.add_argument("--json", action="store_true", help="line-oriented JSON output")
        p.add_argument("--threads", type=int, default=None, help="worker pool size (or HEGEMONY_THREADS)")

    p = sub.add_parser("keygen", help="generate an additive keypair or a lattice key file")
    p.add_argument("--kind", choices=["paillier", "ckks"], default="ckks")
    p.add_argument("--bits", type=int, default=512, help="modulus size for --kind paillier")
    p.add_argument("--weights", default="demo:2conv", help="model file (or demo:2conv / demo:3conv) fixing the rotation steps")
    p.add_argument("--size", type=int, default=32, help="input image side for demo specs")
    p.add_argument("--degree", type=int, default=8192)
    p.add_argument("--budget", type=int, default=None, help="override the level budget")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_keygen)

    p = sub.add_parser("ceremony", help="deal threshold key shares")
    p.add_argument("--shares", type=int, default=3)
    p.add_argument("--bits", type=int, default=512, help="modulus size; each prime gets half")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_ceremony)

    p = sub.add_parser("encrypt-image", help="encrypt a grayscale image row by row")
    p.add_argument("--image", required=True, help="PGM (P2/P5) or CSV")
    p.add_argument("--keys", help="lattice key file (required for --backend ckks)")
    p.add_argument("--backend", choices=["sim", "ckks"], default="ckks")
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_encrypt_image)

    p = sub.add_parser("infer", help="run a model over an encrypted image")
    p.add_argument("--weights", required=True, help="model file or demo:2conv / demo:3conv")
    p.add_argument("--input", required=True, help="output of encrypt-image")
    p.add_argument("--keys", help="lattice key file (required for --backend ckks)")
    p.add_argument("--backend", choices=["sim", "ckks"], default="ckks")
    p.add_argument("--out", required=True, help="encrypted logits file")
    common(p)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("decrypt-result", help="decrypt logits produced by infer")
    p.add_argument("--input", required=True)
    p.add_argument("--keys", help="lattice key file for lattice results")
    common(p)
    p.set_defaults(fn=cmd_decrypt_result)

    p = sub.add_parser("fed-server", help="serve aggregation rounds over TCP")
    p.add_argument("--listen", default="127.0.0.1:7710", help="host:port")
    p.add_argument("--clients", type=int, default=3)
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--n-weights", type=int, default=100)
    p.add_argument("--pub", required=True, help="threshold public key JSON from ceremony")
    p.add_argument("--timeout", type=float, default=60.0)
    common(p)
    p.set_defaults(fn=cmd_fed_server)

    p = sub.add_parser("fed-client", help="join a fed-server as one share holder")
    p.add_argument("--connect", default="127.0.0.1:7710", help="host:port")
    p.add_argument("--share", required=True, help="key share JSON from ceremony")
    p.add_argument("--client-id", type=int, required=True)
    p.add_argument("--weights-dir", help="replay client{c}_round{t}.npy instead of the synthetic stub")
    p.add_argument("--timeout", type=float, default=60.0)
    common(p)
    p.set_defaults(fn=cmd_fed_client)

    p = sub.add_parser("fed-sim", help="whole federated pipeline in one process")
    p.add_argument("--clients", type=int, default=3)
    p.add_argument("--rounds", type=int, default=3)
    p.add_argument("--key-bits", type=int, default=512)
    p.add_argument("--n-weights", type=int, default=1000)
    p.add_argument("--weights-dir", help="replay client{c}_round{t}.npy instead of the synthetic stub")
    p.add_argument("--out-dir", default="fed_report")
    common(p)
    p.set_defaults(fn=cmd_fed_sim)

    p = sub.add_parser("bench", help="time inference per layer; deeper must cost more")
    p.add_argument("--layers", type=int, choices=[2, 3], default=None,
                   help="bench a single depth instead of comparing both")
    p.add_argument("--size", type=int, choices=[32, 112], default=32)
    p.add_argument("--backend", choices=["sim", "ckks"], default="ckks")
    p.add_argument("--degree", type=int, default=8192)
    p.add_argument("--out-dir", default="bench_report")
    common(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("verify", help="run the acceptance checks")
    p.add_argument("--suite", choices=["paillier", "threshold", "ckks", "kernels", "fedavg", "all"],
                   default="all")
    common(p)
    p.set_defaults(fn=cmd_verify)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BudgetExhausted as exc:
        print(json.dumps({"error": "BudgetExhausted", "message": str(exc), "layer": exc.layer}), file=sys.stderr)
        return 4
    except HegemonyError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
