"""Command-line entry point: ``acom <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O or format error,
4 protocol or hash mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import itertools
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from acom.coding import (
    Bitstream,
    CodeHistogram,
    accumulate,
    code_lengths_for,
    decode_stream,
    empirical_entropy,
    encode_stream,
    entropy_bitrate,
    raw_bitrate,
    rate_report,
    read_tokens,
)
from acom.errors import CodebookMismatchError, ConfigError, ContractError, FramingError, ProtocolError
from acom.model import LossWeights, SplitModel, accuracy, mac_count
from acom.model.checkpoint import load_checkpoint, save_checkpoint
from acom.model.network import classification_layers, sequence_layers
from acom.model.synthetic import make_classification, make_sequence, train_test_split
from acom.model.training import TrainConfig, finetune, token_histogram_input, train_baseline
from acom.pipeline import simulate
from acom.pipeline.session import device_tokens
from acom.rvq import Codebook, dequantize_batch, quantize_batch

log = logging.getLogger("acom")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_PROTOCOL = 0, 2, 3, 4

DATA_DEFAULTS = {
    "classification": {"num_classes": 10, "num_samples": 4000, "frames": 8, "feat_dim": 16,
                       "separation": 2.5, "noise": 1.0, "test_fraction": 0.25},
    "sequence": {"num_samples": 300, "alphabet": 4, "min_len": 2, "max_len": 5, "noise": 0.3,
                 "test_fraction": 0.25},
}


@dataclass
class RunConfig:
    """Everything a run needs; stored as JSON.

    ``frame_rate`` is the frame rate of the raw input; the rate at the split
    point follows from the pooling layers before it. ``layers`` may be left
    out to use the default stack for the task.
    """

    task: str = "classification"
    layers: list | None = None
    split_layer: int | None = None
    codebooks: int = 2
    codebook_size: int = 64
    code_dim: int = 16
    frame_rate: float | None = None
    lam: float = 0.3
    beta: float = 0.25
    epsilon: float = 0.1
    seed: int = 0
    learning_rate: float = 0.05
    steps: int = 1500
    batch_size: int = 32
    codebook_update: str = "ema"
    entropy_mode: bool = False
    data: dict = field(default_factory=dict)

    _RENAMED = {"lambda": "lam"}

    def __post_init__(self):
        if self.task not in DATA_DEFAULTS:
            raise ConfigError(f"task must be 'sequence' or 'classification', got {self.task!r}")
        unknown = set(self.data) - set(DATA_DEFAULTS[self.task])
        if unknown:
            raise ConfigError(f"unknown data keys for {self.task}: {', '.join(sorted(unknown))}")
        self.data = {**DATA_DEFAULTS[self.task], **self.data}
        if self.codebooks < 1 or self.codebook_size < 1 or self.code_dim < 1:
            raise ConfigError("codebooks, codebook_size and code_dim must be positive")
        if self.frame_rate is None:
            self.frame_rate = 160.0 if self.task == "classification" else 100.0
        if self.frame_rate <= 0:
            raise ConfigError("frame_rate must be positive")
        self.weights()
        self.train_config()

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("configuration must be a JSON object")
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in raw.items():
            name = cls._RENAMED.get(key, key)
            if name not in names or key in cls._RENAMED.values():
                raise ConfigError(f"unknown configuration key {key!r}")
            kwargs[name] = value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["lambda"] = out.pop("lam")
        return out

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(raw)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def weights(self) -> LossWeights:
        return LossWeights(self.lam, self.beta, self.epsilon)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(learning_rate=self.learning_rate, steps=self.steps, batch_size=self.batch_size,
                           seed=self.seed if seed is None else seed, codebook_update=self.codebook_update)

    def input_dim(self) -> int:
        if self.task == "classification":
            return self.data["feat_dim"]
        return self.data["alphabet"] + 1

    def build_model(self) -> SplitModel:
        d = self.data
        if self.layers is not None:
            specs = self.layers
        elif self.task == "classification":
            specs = classification_layers(d["feat_dim"], d["num_classes"], self.code_dim)
        else:
            specs = sequence_layers(self.input_dim(), d["alphabet"], self.code_dim)
        split = self.split_layer or (5 if self.task == "classification" else 4)
        return SplitModel.from_specs(specs, split, self.frame_rate, self.task, seed=self.seed)

    def dataset(self):
        d = self.data
        if self.task == "classification":
            data = make_classification(d["num_classes"], d["num_samples"], d["frames"], d["feat_dim"],
                                       d["separation"], d["noise"], seed=self.seed)
        else:
            data = make_sequence(d["num_samples"], d["alphabet"], d["min_len"], d["max_len"],
                                 noise=d["noise"], seed=self.seed)
        return train_test_split(data, d["test_fraction"], self.seed)


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return RunConfig.load(args.config)
    return RunConfig(task=getattr(args, "task", None) or "classification")


def _load_array(path) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False)
    except ValueError as exc:
        raise FramingError(f"{path}: not a numpy array file ({exc})") from None


def cmd_train(args) -> int:
    cfg = _load_config(args)
    train, test = cfg.dataset()
    model = cfg.build_model()
    history = train_baseline(model, train, cfg.weights(), cfg.train_config())
    meta, _ = save_checkpoint(model, args.out, cfg.weights())
    print(f"checkpoint={meta} loss={np.mean(history[-20:]):.6f} accuracy={accuracy(model, test):.6f}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _load_config(args)
    base, _ = load_checkpoint(args.checkpoint)
    train, test = cfg.dataset()
    splits = args.split or [cfg.split_layer or base.split]
    stages = args.stages or [cfg.codebooks]
    sizes = args.size or [cfg.codebook_size]
    combos = list(itertools.product(splits, stages, sizes))
    header = f"{'M':>3} {'K':>3} {'V':>6} {'loss':>10} {'accuracy':>9} {'raw_bps':>10} {'entropy_bps':>12} {'device_macs':>12}"
    print(header)
    for M, K, V in combos:
        model = base.copy()
        model.split = M
        cb, history = finetune(model, train, K, V, cfg.weights(), cfg.train_config())
        rate = model.frame_rate()
        hist = accumulate(CodeHistogram.empty(K, V), token_histogram_input(model, test, cb))
        _, total = empirical_entropy(hist)
        macs = mac_count(model, M, K, V).device_total
        print(f"{M:>3} {K:>3} {V:>6} {np.mean(history[-20:]):>10.4f} {accuracy(model, test, cb):>9.4f} "
              f"{raw_bitrate(rate, K, V):>10.2f} {entropy_bitrate(rate, total):>12.2f} {macs:>12}")
        prefix = args.out if len(combos) == 1 else f"{args.out}_M{M}_K{K}_V{V}"
        save_checkpoint(model, prefix, cfg.weights())
        cb.save(f"{prefix}.acbk")
    return EXIT_OK


def _device_frames(args, cb):
    x = _load_array(args.input)
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
        h = model.forward_device(x)
        rate = model.frame_rate()
    else:
        h = x
        rate = args.frame_rate
    if args.frame_rate is not None:
        rate = args.frame_rate
    if rate is None:
        raise ConfigError("--frame-rate is required when encoding features without a checkpoint")
    return np.asarray(h, dtype=np.float64).reshape(-1, cb.dim) if h.size else np.zeros((0, cb.dim)), rate


def cmd_encode(args) -> int:
    cb = Codebook.load(args.codebook)
    frames, rate = _device_frames(args, cb)
    if frames.shape[-1] != cb.dim:
        raise ConfigError(f"features have {frames.shape[-1]} dims but the codebook has D={cb.dim}")
    tokens = quantize_batch(frames, cb, count_usage=False).indices
    stream = encode_stream(tokens, cb, args.mode, frame_rate=rate)
    Path(args.out).write_bytes(stream.to_bytes())
    print(f"frames={len(tokens)} bytes={len(stream.to_bytes())} mode={args.mode}")
    return EXIT_OK


def cmd_decode(args) -> int:
    cb = Codebook.load(args.codebook)
    tokens = decode_stream(Path(args.input).read_bytes(), cb)
    np.save(args.out, dequantize_batch(tokens, cb))
    if args.tokens:
        np.save(args.tokens, tokens)
    print(f"frames={len(tokens)}")
    return EXIT_OK


def cmd_stats(args) -> int:
    path = Path(args.input)
    if path.suffix == ".npy":
        tokens = np.asarray(_load_array(path), dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[:, None]
        if args.size is None or args.frame_rate is None:
            raise ConfigError("token dumps need --size and --frame-rate")
        size, rate = args.size, args.frame_rate
    else:
        stream = Bitstream.from_bytes(path.read_bytes())
        tokens = read_tokens(stream)
        size = stream.size
        rate = stream.frame_rate if args.frame_rate is None else args.frame_rate
    hist = accumulate(CodeHistogram.empty(tokens.shape[1], size), tokens)
    print(rate_report(hist, rate).format_line())
    return EXIT_OK


def cmd_simulate(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    cb = Codebook.load(args.codebook)
    x = _load_array(args.input)
    code_lengths = None
    if args.mode == "huffman":
        tokens = device_tokens(x, model, cb)
        counts = np.stack([np.bincount(tokens[:, k], minlength=cb.size) for k in range(cb.stages)])
        code_lengths = code_lengths_for(counts)
    out = simulate(x, model, cb, args.transport, code_lengths=code_lengths, batch=args.batch,
                   timeout=args.timeout)
    if args.out:
        Path(args.out).write_bytes(out["result"])
    logits = np.frombuffer(out["result"], dtype="<f4")
    pred = int(logits.argmax()) if logits.size and model.task == "classification" else -1
    print(f"frames={out['frames_sent']} wire_bytes={out['bytes_sent']} result_bytes={len(out['result'])} "
          f"prediction={pred}")
    return EXIT_OK


def cmd_macs(args) -> int:
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        model = _load_config(args).build_model()
    if args.split == "all":
        splits = range(1, model.num_layers + 1)
    else:
        splits = [int(args.split)] if args.split else [model.split]
    for M in splits:
        report = mac_count(model, M, args.stages, args.size)
        for line in report.lines():
            print(line)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acom", description="Task-driven RVQ feature coding toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--task", choices=sorted(DATA_DEFAULTS), help="defaults to use without --config")

    p = sub.add_parser("train", help="train the continuous baseline")
    with_config(p)
    p.add_argument("--out", required=True, help="checkpoint prefix")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="insert the quantizer and finetune; lists sweep M, K, V")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", type=_int_list)
    p.add_argument("--stages", type=_int_list)
    p.add_argument("--size", type=_int_list)
    p.add_argument("--out", required=True, help="output prefix for checkpoint and codebook")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("encode", help="quantize features (or raw inputs with --checkpoint) to a bitstream")
    p.add_argument("--codebook", required=True)
    p.add_argument("--input", required=True, help=".npy array")
    p.add_argument("--checkpoint", help="run device layers on raw inputs first")
    p.add_argument("--frame-rate", type=float)
    p.add_argument("--mode", choices=["raw", "huffman"], default="raw")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="bitstream to dequantized features")
    p.add_argument("--codebook", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help=".npy for the features")
    p.add_argument("--tokens", help="optional .npy for the token array")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("stats", help="rate report for a bitstream or .npy token dump")
    p.add_argument("input")
    p.add_argument("--size", type=int, help="codebook size V (token dumps)")
    p.add_argument("--frame-rate", type=float, help="frames per second (overrides the header)")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("simulate", help="run device and cloud endpoints on one input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--input", required=True, help=".npy (T, F) input")
    p.add_argument("--transport", default="loopback", help="'loopback' or host:port")
    p.add_argument("--mode", choices=["raw", "huffman"], default="raw")
    p.add_argument("--batch", action="store_true", help="send all frames in one FRAME message")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--out", help="write the RESULT payload here")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("macs", help="multiply-accumulate report for one second of input")
    with_config(p)
    p.add_argument("--checkpoint")
    p.add_argument("--split", help="M, or 'all' to sweep 1..L")
    p.add_argument("--stages", type=int, default=0)
    p.add_argument("--size", type=int, default=0)
    p.set_defaults(func=cmd_macs)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CodebookMismatchError, ProtocolError) as exc:
        return _fail(exc, EXIT_PROTOCOL)
    except (ConfigError, ContractError) as exc:
        return _fail(exc, EXIT_CONFIG)
    except (FramingError, OSError) as exc:
        return _fail(exc, EXIT_IO)


def _fail(exc, code) -> int:
    print(f"acom: error: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
