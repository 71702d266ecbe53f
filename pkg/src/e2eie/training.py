from __future__ import annotations

import dataclasses
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, NamedTuple, Protocol, Sequence

import numpy as np
import toml

from .rng import DROPOUT, SHUFFLE, SPLIT, derive_rng
from .tensor import Tape, Tensor, backward, scale

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
MODELS = ("pointer", "baseline")
LOG_HEADER = ("update", "loss", "val_metric", "wall_time")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field_name = field_name
        self.message = message
        super().__init__(f"{field_name}: {message}")


class NonFiniteError(ArithmeticError):
    def __init__(self, name: str, message: str):
        self.name = name
        self.message = message
        super().__init__(f"{name}: {message}")


def _check_type(name: str, annotation, value):
    """設定値が型注釈（"int", "float", "str | None"など）に合うことを確かめる。intはfloatの欄にも使える。"""
    kinds = {kind.strip() for kind in str(getattr(annotation, "__name__", annotation)).split("|")}

    if value is None:
        accepted = "None" in kinds
    elif isinstance(value, bool):
        accepted = "bool" in kinds
    elif isinstance(value, int):
        accepted = bool(kinds & {"int", "float"})
        if accepted and "int" not in kinds:
            value = float(value)
    elif isinstance(value, float):
        accepted = "float" in kinds
    elif isinstance(value, str):
        accepted = "str" in kinds
    else:
        accepted = False

    if not accepted:
        expected = " or ".join(sorted(kinds))
        raise ConfigError(name, f"expected {expected}, got {type(value).__name__} {value!r}")
    return value


@dataclass
class TrainConfig:
    """学習の設定。TOMLファイルとして保存・復元できる。"""

    model: str = "pointer"
    dataset: str = "atis"
    train_path: str | None = None
    schema_path: str | None = None
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    max_updates: int = 20_000
    eval_interval: int = 250
    patience: int = 8
    validation_fraction: float = 0.1
    clip_norm: float = 5.0
    seed: int = 42
    min_count: int = 1
    size_multiplier: int = 1
    use_summarizer: bool = False
    embedding_dropout: float = 0.0
    recurrent_dropout: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> TrainConfig:
        if self.model not in MODELS:
            raise ConfigError("model", f"must be one of {MODELS}, got {self.model!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate", "must be positive")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(name, "must be in [0, 1)")
        if not self.epsilon > 0:
            raise ConfigError("epsilon", "must be positive")
        for name in ("batch_size", "max_updates", "eval_interval", "patience", "min_count", "size_multiplier"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError("validation_fraction", "must be in (0, 1)")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm", "must be positive")
        if self.seed < 0:
            raise ConfigError("seed", "must be non-negative")
        for name in ("embedding_dropout", "recurrent_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(name, "must be in [0, 1)")
        return self

    def override(self, **values) -> TrainConfig:
        """Noneでない値だけを置き換えた設定を返す（コマンドライン引数を優先するため）。"""
        return dataclasses.replace(self, **{key: value for key, value in values.items() if value is not None})

    def to_dict(self) -> dict:
        obj = {"version": CONFIG_VERSION}
        obj.update({key: value for key, value in dataclasses.asdict(self).items() if value is not None})
        return obj

    @classmethod
    def from_dict(cls, obj: Mapping) -> TrainConfig:
        obj = dict(obj)
        version = obj.pop("version", None)
        if version != CONFIG_VERSION:
            raise ConfigError("version", f"unsupported config version {version!r} (expected {CONFIG_VERSION})")

        known = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in list(obj.items()):
            if key not in known:
                raise ConfigError(key, "unknown setting")
            obj[key] = _check_type(key, known[key].type, value)

        return cls(**obj)

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> TrainConfig:
        with Path(path).expanduser().resolve().open(mode="r", encoding="utf-8") as f:
            try:
                obj = toml.load(f)
            except toml.TomlDecodeError as e:
                raise ConfigError("config", f"{path}: {e}") from e
        return cls.from_dict(obj)

    def write_to_file(self, path: str | os.PathLike, *, mkdir: bool = False) -> TrainConfig:
        path = Path(path).expanduser().resolve()

        if mkdir:
            path.parent.mkdir(parents=True, exist_ok=True)

        with path.open(mode="w", encoding="utf-8") as f:
            toml.dump(self.to_dict(), f)

        return self


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: Mapping[str, Tensor], **hyperparameters) -> AdamState:
        state = cls(**hyperparameters)
        state.first = {name: np.zeros_like(tensor.data) for name, tensor in params.items()}
        state.second = {name: np.zeros_like(tensor.data) for name, tensor in params.items()}
        return state

    @classmethod
    def from_config(cls, params: Mapping[str, Tensor], config: TrainConfig) -> AdamState:
        return cls.create(
            params,
            learning_rate=config.learning_rate,
            beta1=config.beta1,
            beta2=config.beta2,
            epsilon=config.epsilon,
        )


def _gradient(tensor: Tensor) -> np.ndarray:
    return tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> AdamState:
    """バイアス補正付きのAdamで1回更新し、勾配を0に戻す。
    非有限の勾配が一つでもあれば、何も更新せずにNonFiniteErrorを送出する。
    """
    for name, tensor in params.items():
        if not np.all(np.isfinite(_gradient(tensor))):
            raise NonFiniteError(name, "non-finite gradient")

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step

    for name, tensor in params.items():
        grad = _gradient(tensor)
        first = state.first.setdefault(name, np.zeros_like(tensor.data))
        second = state.second.setdefault(name, np.zeros_like(tensor.data))
        if first.shape != tensor.shape:
            raise ValueError(f"{name}: optimizer state shape {first.shape} != parameter shape {tensor.shape}")

        first *= state.beta1
        first += (1.0 - state.beta1) * grad
        second *= state.beta2
        second += (1.0 - state.beta2) * grad * grad

        update = (first / correction1) / (np.sqrt(second / correction2) + state.epsilon)
        tensor.data -= (state.learning_rate * update).astype(tensor.data.dtype)
        tensor.zero_grad()

    return state


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """全パラメータの勾配をまとめたL2ノルムがmax_normを超えたら縮小する。クリップ前のノルムを返す。"""
    total = math.sqrt(sum(float(np.sum(_gradient(tensor).astype(np.float64) ** 2)) for tensor in params.values()))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for tensor in params.values():
            if tensor.grad is not None:
                tensor.grad *= factor
    return total


class EarlyStopping:
    """検証指標（大きいほど良い）が改善しなかった評価がpatience回続いたら停止する。
    最良時点のパラメータを保持する。
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError(f"patience must be >= 1: {patience}")
        self._patience = patience
        self._n_not_improve = 0
        self.best_metric = -math.inf
        self.best_update: int | None = None
        self.best_state: dict[str, np.ndarray] | None = None
        self.evaluations = 0

    @property
    def should_stop(self) -> bool:
        return self._n_not_improve >= self._patience

    def update(self, metric: float, update: int, params: Mapping[str, Tensor]) -> bool:
        """評価結果を記録し、最良を更新した場合にTrueを返す。"""
        self.evaluations += 1

        if metric > self.best_metric:
            self.best_metric = metric
            self.best_update = update
            self.best_state = {name: tensor.data.copy() for name, tensor in params.items()}
            self._n_not_improve = 0
            return True

        self._n_not_improve += 1
        return False

    def restore(self, params: Mapping[str, Tensor]) -> None:
        if self.best_state is None:
            return
        for name, tensor in params.items():
            tensor.data = self.best_state[name].copy()


def split_validation(examples: Sequence, fraction: float, rng: np.random.Generator) -> tuple[list, list]:
    """学習データから検証データを切り出す。両者は重ならない。"""
    if len(examples) < 2:
        raise ValueError(f"need at least 2 examples to split off a validation set, got {len(examples)}")

    order = rng.permutation(len(examples))
    n_valid = min(max(1, int(round(len(examples) * fraction))), len(examples) - 1)
    valid_index, train_index = order[:n_valid], order[n_valid:]
    assert not set(valid_index.tolist()) & set(train_index.tolist())

    return [examples[i] for i in train_index], [examples[i] for i in valid_index]


class Trainable(Protocol):
    kind: str

    def named_parameters(self) -> dict[str, Tensor]: ...

    def loss(self, example, training: bool, rng: np.random.Generator | None) -> Tensor: ...

    def validate(self, examples: Sequence) -> float: ...

    def write_to_file(self, path: str | os.PathLike) -> Trainable: ...


class LogRow(NamedTuple):
    update: int
    loss: float
    val_metric: float
    wall_time: float


class TrainingLog:
    """タブ区切りの追記専用ログ。"""

    def __init__(self, path: str | os.PathLike | None = None):
        self._path = Path(path).expanduser().resolve() if path is not None else None
        self.rows: list[LogRow] = []

        if self._path is not None and not self._path.exists():
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._path.write_text("\t".join(LOG_HEADER) + "\n", encoding="utf-8")

    @property
    def path(self) -> Path | None:
        return self._path

    def append(self, row: LogRow) -> LogRow:
        self.rows.append(row)
        if self._path is not None:
            with self._path.open(mode="a", encoding="utf-8") as f:
                print(f"{row.update}\t{row.loss:.6f}\t{row.val_metric:.6f}\t{row.wall_time:.3f}", file=f)
        return row


@dataclass
class TrainResult:
    best_metric: float
    best_update: int | None
    updates: int
    log: list[LogRow]
    checkpoint_path: Path | None = None


def _batches(examples: Sequence, batch_size: int, rng: np.random.Generator) -> Iterator[list]:
    """エポックごとにシャッフルしたミニバッチを無限に返す。"""
    while True:
        order = rng.permutation(len(examples))
        for start in range(0, len(order), batch_size):
            yield [examples[i] for i in order[start : start + batch_size]]


def train(
    model: Trainable,
    config: TrainConfig,
    examples: Sequence,
    validation: Sequence | None = None,
    out_dir: str | os.PathLike | None = None,
) -> TrainResult:
    """ミニバッチのAdamで学習し、検証指標による早期終了を行う。

    validationを省略した場合はexamplesからvalidation_fractionの割合を切り出す。
    終了時、modelのパラメータは検証指標が最良だった時点のものに戻る。
    out_dirを指定した場合は最良時点のチェックポイントと学習ログをそこに書き出す。
    """
    if validation is None:
        examples, validation = split_validation(examples, config.validation_fraction, derive_rng(config.seed, SPLIT))
    if not examples:
        raise ValueError("no training examples")

    out_dir = Path(out_dir).expanduser().resolve() if out_dir is not None else None
    checkpoint_path = out_dir / "model.ckpt" if out_dir is not None else None
    log = TrainingLog(out_dir / "train.log" if out_dir is not None else None)

    params = model.named_parameters()
    state = AdamState.from_config(params, config)
    stopper = EarlyStopping(config.patience)
    batches = _batches(examples, config.batch_size, derive_rng(config.seed, SHUFFLE))
    dropout_rng = derive_rng(config.seed, DROPOUT)

    logger.info("training %s on %d examples, validating on %d", model.kind, len(examples), len(validation))
    started = time.perf_counter()
    losses: list[float] = []
    update = 0

    try:
        while update < config.max_updates:
            batch = next(batches)
            batch_loss = 0.0

            for example in batch:
                with Tape():
                    loss = model.loss(example, True, dropout_rng)
                    scaled = scale(loss, 1.0 / len(batch))
                if not math.isfinite(loss.item()):
                    raise NonFiniteError("loss", f"non-finite loss at update {update + 1}")
                backward(scaled)
                batch_loss += loss.item() / len(batch)

            clip_grad_norm(params, config.clip_norm)
            adam_step(params, state)
            update += 1
            losses.append(batch_loss)
            logger.debug("update %d: loss=%.4f", update, batch_loss)

            if update % config.eval_interval == 0 or update == config.max_updates:
                metric = model.validate(validation)
                row = log.append(LogRow(update, float(np.mean(losses)), metric, time.perf_counter() - started))
                losses = []
                logger.info("update %d: loss=%.4f val_metric=%.4f", row.update, row.loss, row.val_metric)

                if stopper.update(metric, update, params) and checkpoint_path is not None:
                    model.write_to_file(checkpoint_path)
                if stopper.should_stop:
                    logger.info(
                        "early stopping at update %d (best %.4f at %s)",
                        update,
                        stopper.best_metric,
                        stopper.best_update,
                    )
                    break
    except NonFiniteError:
        # 最後に保存した（最良の）チェックポイントはそのまま残す
        stopper.restore(params)
        raise

    stopper.restore(params)
    return TrainResult(stopper.best_metric, stopper.best_update, update, log.rows, checkpoint_path)
