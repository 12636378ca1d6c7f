"""Loss, deterministic SGD training loop, and model file serialization."""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from .model import ConvSpec, ModelConfig, Network, init_parameters

MODEL_MAGIC = b"FGZE"
MODEL_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


def l1_loss(pred: np.ndarray, target: np.ndarray):
    """Mean over the batch of the per-sample L1 distance, plus its
    subgradient w.r.t. the predictions (0 at exact ties)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    d = pred - target
    loss = float(np.abs(d).sum(axis=1).mean())
    grad = np.sign(d) / d.shape[0]
    return loss, grad


@dataclass
class TrainedModel:
    config: ModelConfig
    params: dict[str, np.ndarray]
    log: list[tuple[int, float, float | None]]  # (epoch, train_loss, val_loss)

    def network(self) -> Network:
        return Network(self.config, self.params)


def _stack_dataset(dataset):
    if isinstance(dataset, tuple) and len(dataset) == 2:
        inputs, targets = dataset
        return np.asarray(inputs, dtype=float), np.asarray(targets, dtype=float)
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    inputs = np.stack([np.asarray(x, dtype=float) for x, _ in dataset])
    targets = np.stack([np.asarray(t, dtype=float).reshape(2) for _, t in dataset])
    return inputs, targets


def train(config: ModelConfig, dataset, val=None, epoch_callback=None) -> TrainedModel:
    """Minibatch SGD with momentum, fully determined by config.seed.

    ``dataset`` is a list of (input, target) pairs or an (inputs, targets)
    array tuple.  Raises TrainingDivergedError if the loss goes non-finite.
    """
    inputs, targets = _stack_dataset(dataset)
    n = inputs.shape[0]
    val_data = _stack_dataset(val) if val is not None else None

    params = init_parameters(config, config.seed)
    net = Network(config, params)
    velocity = {name: np.zeros_like(p) for name, p in params.items()}
    second = {name: np.zeros_like(p) for name, p in params.items()}
    shuffle_rng = np.random.default_rng([config.seed, 1])
    adam_eps = 1e-8
    step = 0

    log: list[tuple[int, float, float | None]] = []
    for epoch in range(config.epochs):
        lr = config.learning_rate * config.lr_decay**epoch
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            pred = net.forward(inputs[idx])
            loss, dpred = l1_loss(pred, targets[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss diverged at epoch {epoch}, batch {start // config.batch_size}")
            total += loss * len(idx)
            grads = net.backward(dpred)
            if config.optimizer == "sgd":
                for name, p in params.items():
                    v = velocity[name]
                    v *= config.momentum
                    v -= lr * grads[name]
                    p += v
            else:
                step += 1
                b1, b2 = config.momentum, config.beta2
                c1 = 1.0 - b1**step
                c2 = 1.0 - b2**step
                for name, p in params.items():
                    g = grads[name]
                    m = velocity[name]
                    v = second[name]
                    m *= b1
                    m += (1.0 - b1) * g
                    v *= b2
                    v += (1.0 - b2) * g * g
                    p -= lr * (m / c1) / (np.sqrt(v / c2) + adam_eps)
        train_loss = total / n
        val_loss = None
        if val_data is not None:
            vpred = net.predict(val_data[0])
            val_loss, _ = l1_loss(vpred, val_data[1])
        log.append((epoch, train_loss, val_loss))
        if epoch_callback is not None:
            epoch_callback(epoch, train_loss, val_loss)
    return TrainedModel(config=config, params=params, log=log)


def write_training_log(path, log) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,train_loss,val_loss\n")
        for epoch, train_loss, val_loss in log:
            val = "" if val_loss is None else repr(float(val_loss))
            f.write(f"{epoch},{float(train_loss)!r},{val}\n")


def _config_to_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["conv"] = [list(asdict(spec).values()) for spec in config.conv]
    d["spatial_weights"] = list(config.spatial_weights) if config.spatial_weights else None
    d["fc"] = list(config.fc)
    return d


def _config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    d["conv"] = tuple(ConvSpec(*row) for row in d["conv"])
    sw = d.get("spatial_weights")
    d["spatial_weights"] = tuple(sw) if sw is not None else None
    d["fc"] = tuple(d["fc"])
    return ModelConfig(**d)


def save_model(path, model: TrainedModel) -> None:
    """Versioned binary model file: magic, header, float64 LE blob, CRC32."""
    names = sorted(model.params)
    header = {
        "config": _config_to_dict(model.config),
        "params": [[name, list(model.params[name].shape)] for name in names],
        "log": [[e, t, v] for e, t, v in model.log],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes() for name in names)
    body = (
        MODEL_MAGIC
        + MODEL_VERSION.to_bytes(4, "little")
        + len(header_bytes).to_bytes(4, "little")
        + header_bytes
        + blob
    )
    crc = zlib.crc32(body)
    with open(path, "wb") as f:
        f.write(body)
        f.write(crc.to_bytes(4, "little"))


def load_model(path) -> TrainedModel:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    if zlib.crc32(raw[:-4]) != int.from_bytes(raw[-4:], "little"):
        raise ValueError(f"{path}: checksum mismatch (corrupted file)")
    version = int.from_bytes(raw[4:8], "little")
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    hlen = int.from_bytes(raw[8:12], "little")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    config = _config_from_dict(header["config"])
    params: dict[str, np.ndarray] = {}
    offset = 12 + hlen
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        params[name] = arr.astype(float)
        offset += count * 8
    log = [(int(e), float(t), None if v is None else float(v)) for e, t, v in header["log"]]
    model = TrainedModel(config=config, params=params, log=log)
    model.network()  # validates parameter set against the config
    return model
