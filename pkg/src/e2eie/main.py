from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Sequence, Union

import click

from . import __version__, checkpoint
from .checkpoint import CheckpointError
from .corpus import (
    DATASETS,
    BioSentence,
    CorpusFormatError,
    E2ERecord,
    FieldSchema,
    RecordFormatError,
    build_vocab,
    field_frequencies,
    field_statistics,
    numbered_lines,
    parse_record,
    prepare_input,
    read_bio,
    read_records,
    schema_of,
    select_schema,
    strip_input,
    to_e2e,
    write_records,
)
from .evaluation import DEFAULT_RESAMPLES, AlignmentError, bootstrap_significance, exhaustive_significance, muc5_score
from .pointer import PointerModel, PointerModelConfig
from .rng import INIT, SPLIT, derive_rng
from .selfcheck import run_selfcheck
from .tagger import Tagger, TaggerConfig
from .training import ConfigError, NonFiniteError, TrainConfig, split_validation, train

logger = logging.getLogger(__name__)

DEFAULT_SEED = 42

Model = Union[PointerModel, Tagger]


class InputError(click.ClickException):
    """利用者の入力（ファイル、設定）に起因するエラー。"""

    exit_code = 2


class InternalError(click.ClickException):
    """内部の検査（セルフチェック、数値の有限性）に失敗した。"""

    exit_code = 3


class CustomOrderGroup(click.Group):
    def list_commands(self, ctx: click.Context) -> list[str]:
        # Usageに表示されるサブコマンドの表示順序を制御するための仕掛け
        command_order = ["convert", "train", "predict", "evaluate", "significance", "selfcheck"]
        unlisted_commands = sorted(set(self.commands.keys()) - set(command_order))
        return command_order + unlisted_commands


def default_schema_path(out_path: Path) -> Path:
    """レコードファイルと同じ場所に置くスキーマのファイル名。

    Examples:
        >>> default_schema_path(Path("data/atis.train.jsonl"))
        PosixPath('data/atis.train.schema.toml')
    """
    return out_path.with_name(out_path.name.split(".")[0] + "".join(out_path.suffixes[:-1]) + ".schema.toml")


def load_schema(_ctx, _param, value: str | None) -> FieldSchema | None:
    if value is None:
        return None
    try:
        return FieldSchema.from_file(value)
    except (OSError, ValueError, KeyError) as e:
        raise click.BadParameter(f"{value}: {e}") from e


def load_config(_ctx, _param, value: str | None) -> TrainConfig:
    """設定ファイルを読み込む（省略時は既定値）。"""
    if value is None:
        return TrainConfig()
    try:
        return TrainConfig.from_file(value)
    except ConfigError as e:
        raise click.BadParameter(f"{value}: {e}") from e


def load_model(path: str | Path) -> Model:
    """チェックポイントの種類に応じてモデルを復元する。"""
    try:
        header, _ = checkpoint.read_container(path)
        kind = header.get("kind")
        if kind == PointerModel.kind:
            return PointerModel.from_file(path)
        if kind == Tagger.kind:
            return Tagger.from_file(path)
    except CheckpointError as e:
        raise InputError(str(e)) from e
    raise InputError(f"{path}: unknown model kind {kind!r}")


def read_prediction_inputs(path: str | Path) -> list[E2ERecord]:
    """予測の入力を読み込む。各行はE2Eレコード（JSONオブジェクト）か、空白区切りのトークン列。
    JSONオブジェクトとして解釈できない行はトークン列とみなし、カンマとEOSを付加して正解の無いレコードにする。
    """
    records = []
    for line_number, line in numbered_lines(path, RecordFormatError):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            records.append(parse_record(obj, path, line_number))
        else:
            if line.lstrip().startswith("{"):
                logger.warning("%s:%d is not a JSON record, reading it as plain tokens", path, line_number)
            records.append(E2ERecord(prepare_input(line.split())))
    return records


def _echo_field_statistics(sentences: Sequence[BioSentence], records: Sequence[E2ERecord], schema: FieldSchema) -> None:
    """フィールドごとに、値が空でないレコード数とチャンク数を表示する。"""
    with_value = field_statistics(records)
    chunks = field_frequencies(sentences)
    width = max([len("field")] + [len(name) for name in schema.fields])

    click.echo(f"  {'field'.ljust(width)}  {'records':>7}  {'chunks':>7}")
    for name in schema.fields:
        click.echo(f"  {click.style(name.ljust(width), fg='cyan')}  {with_value[name]:>7}  {chunks[name]:>7}")


@click.group(cls=CustomOrderGroup, invoke_without_command=True)
@click.version_option(version=__version__)
@click.option(
    "--verbose",
    "-v",
    count=True,
    help="Verbose mode. Can be used multiple times to increase verbosity.",
)
@click.pass_context
def cli(ctx: click.Context, verbose: int) -> None:
    if verbose:
        if verbose == 1:
            logging.basicConfig(level=logging.INFO)
        elif verbose >= 2:
            logging.basicConfig(
                level=logging.DEBUG,
                format="%(asctime)s - %(levelname)s - %(funcName)s - %(message)s",
            )

    # サブコマンドが指定されていない場合はヘルプを表示
    # （--verboseのようなグローバルオプションを定義した場合、この処理が必要になる）
    if not ctx.invoked_subcommand:
        click.echo(ctx.get_help())


@cli.command(name="convert", no_args_is_help=True)
@click.option("--dataset", "-d", type=click.Choice(DATASETS), required=True, help="Dataset kind")
@click.option("--out", "-o", "out_path", type=click.Path(dir_okay=False), required=True, help="E2E record file")
@click.option("--schema-out", type=click.Path(dir_okay=False), help="Schema manifest  [default: next to --out]")
@click.option("--schema", callback=load_schema, help="Reuse an existing schema (e.g. for test files)")
@click.argument("bio_path", type=click.Path(exists=True, dir_okay=False))
def cmd_convert(dataset: str, out_path: str, schema_out: str | None, schema: FieldSchema | None, bio_path: str) -> None:
    """BIO形式のファイルをE2Eレコードに変換する。"""
    try:
        sentences = read_bio(bio_path)
    except CorpusFormatError as e:
        raise InputError(str(e)) from e

    out_path = Path(out_path)

    try:
        if not sentences:
            logger.warning("%s contains no sentences", bio_path)
            write_records([], out_path, mkdir=True)
            click.echo(click.style("warning", fg="yellow") + f": {bio_path} is empty, wrote 0 records")
            return

        if schema is None:
            schema = select_schema(sentences, dataset)
            schema.write_to_file(schema_out or default_schema_path(out_path), mkdir=True)

        records = to_e2e(sentences, schema)
        count = write_records(records, out_path, mkdir=True)
    except OSError as e:
        raise InputError(f"{e.filename or out_path}: {e.strerror}") from e
    except ValueError as e:
        raise InputError(f"{bio_path}: {e}") from e

    click.echo(f"{count} records ({len(schema)} fields) written to {out_path}")
    _echo_field_statistics(sentences, records, schema)


def _load_training_data(model: str, path: str) -> list:
    try:
        return read_bio(path) if model == "baseline" else read_records(path)
    except CorpusFormatError as e:
        raise InputError(str(e)) from e
    except OSError as e:
        raise InputError(f"{path}: {e.strerror}") from e


def _build_model(config: TrainConfig, examples: Sequence) -> Model:
    vocab = build_vocab(examples, config.min_count)
    rng = derive_rng(config.seed, INIT)

    if config.model == "baseline":
        return Tagger.initialize(TaggerConfig.from_sentences(examples), vocab, rng)

    try:
        if config.schema_path:
            schema = FieldSchema.from_file(config.schema_path)
        else:
            schema = schema_of(examples, config.dataset)
    except (OSError, ValueError, KeyError) as e:
        raise InputError(f"schema: {e}") from e

    for index, record in enumerate(examples):
        missing = [name for name in schema.fields if name not in record.targets]
        if missing:
            raise InputError(f"record {index + 1} has no value for fields {missing}")

    model_config = PointerModelConfig(
        schema.fields,
        size_multiplier=config.size_multiplier,
        use_summarizer=config.use_summarizer,
        embedding_dropout=config.embedding_dropout,
        recurrent_dropout=config.recurrent_dropout,
    )
    return PointerModel.initialize(model_config, vocab, rng)


@cli.command(name="train")
@click.option("--model", "-m", type=click.Choice(["pointer", "baseline"]), help="Model to train  [default: pointer]")
@click.option("--config", "-c", "config", callback=load_config, help="Training config (TOML)")
@click.option("--train", "train_path", type=click.Path(exists=True, dir_okay=False), help="Training data")
@click.option("--validation", type=click.Path(exists=True, dir_okay=False), help="Validation data  [default: split]")
@click.option("--out", "-o", "out_dir", type=click.Path(file_okay=False), default="run", show_default=True)
@click.option("--seed", type=click.IntRange(min=0), help=f"Random seed  [default: {DEFAULT_SEED}]")
@click.option("--max-updates", type=click.IntRange(min=1), help="Number of parameter updates")
@click.option("--batch-size", type=click.IntRange(min=1), help="Mini-batch size")
def cmd_train(
    model: str | None,
    config: TrainConfig,
    train_path: str | None,
    validation: str | None,
    out_dir: str,
    seed: int | None,
    max_updates: int | None,
    batch_size: int | None,
) -> None:
    """モデルを学習し、検証指標が最良の時点のチェックポイントを保存する。

    設定の優先順位は「コマンドライン引数 > 設定ファイル > 既定値」。
    """
    try:
        config = config.override(
            model=model, train_path=train_path, seed=seed, max_updates=max_updates, batch_size=batch_size
        )
    except ConfigError as e:
        raise InputError(str(e)) from e

    if config.train_path is None:
        raise InputError("no training data: use --train or set train_path in the config file")

    examples = _load_training_data(config.model, config.train_path)
    if validation is not None:
        held_out = _load_training_data(config.model, validation)
    else:
        try:
            examples, held_out = split_validation(examples, config.validation_fraction, derive_rng(config.seed, SPLIT))
        except ValueError as e:
            raise InputError(f"{config.train_path}: {e}") from e

    instance = _build_model(config, examples)
    config.write_to_file(Path(out_dir) / "config.toml", mkdir=True)

    try:
        result = train(instance, config, examples, held_out, out_dir)
    except NonFiniteError as e:
        raise InternalError(f"training aborted: {e} (the best checkpoint so far is kept)") from e

    click.echo(f"updates: {result.updates}")
    click.echo(f"best validation metric: {result.best_metric:.4f} (update {result.best_update})")
    click.echo(f"checkpoint: {result.checkpoint_path}")


@cli.command(name="predict", no_args_is_help=True)
@click.option("--out", "-o", "out_path", type=click.Path(dir_okay=False), required=True, help="Prediction file")
@click.option("--schema", callback=load_schema, help="Field schema (baseline with plain token input)")
@click.argument("checkpoint_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("input_path", type=click.Path(exists=True, dir_okay=False))
def cmd_predict(out_path: str, schema: FieldSchema | None, checkpoint_path: str, input_path: str) -> None:
    """入力の各行についてフィールドの値を予測し、E2Eレコードとして書き出す。"""
    model = load_model(checkpoint_path)
    try:
        records = read_prediction_inputs(input_path)
    except CorpusFormatError as e:
        raise InputError(str(e)) from e

    if isinstance(model, PointerModel):
        fields = model.fields
    else:
        if schema is None:
            labelled = [record for record in records if record.targets]
            if records and not labelled:
                raise InputError("baseline predictions on plain token input require --schema")
            schema = schema_of(labelled) if labelled else FieldSchema("unknown", ())
        fields = schema.fields

    for index, record in enumerate(records):
        if record.targets and set(record.targets) != set(fields):
            raise InputError(
                f"{input_path}: record {index + 1} has fields {sorted(record.targets)}, model expects {sorted(fields)}"
            )

    unknown = sum(token not in model.vocab for record in records for token in record.input_tokens)
    total = sum(len(record.input_tokens) for record in records)
    logger.info("%d of %d input tokens are out of vocabulary", unknown, total)

    predictions = []
    for record in records:
        if isinstance(model, PointerModel):
            values = model.decode(record.input_tokens)
        else:
            values = model.extract(strip_input(record.input_tokens), schema)
        predictions.append(E2ERecord(record.input_tokens, {name: values[name] for name in fields}))

    count = write_records(predictions, out_path, mkdir=True)
    click.echo(f"{count} predictions written to {out_path}")


def _read_records_or_fail(path: str) -> list[E2ERecord]:
    try:
        return read_records(path)
    except CorpusFormatError as e:
        raise InputError(str(e)) from e


@cli.command(name="evaluate", no_args_is_help=True)
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output")
@click.argument("pred_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("gold_path", type=click.Path(exists=True, dir_okay=False))
def cmd_evaluate(as_json: bool, pred_path: str, gold_path: str) -> None:
    """MUC-5方式（部分一致なし）でフィールドごとのP/R/F1とマイクロ平均を表示する。"""
    predictions, gold = _read_records_or_fail(pred_path), _read_records_or_fail(gold_path)

    try:
        report = muc5_score([record.targets for record in predictions], [record.targets for record in gold])
    except AlignmentError as e:
        raise InputError(str(e)) from e

    if as_json:
        click.echo(json.dumps(report.to_dict(), indent=2))
    else:
        click.echo(report.to_text())


@cli.command(name="significance", no_args_is_help=True)
@click.option("--resamples", type=click.IntRange(min=1), default=DEFAULT_RESAMPLES, show_default=True)
@click.option("--seed", type=click.IntRange(min=0), default=DEFAULT_SEED, show_default=True, help="Random seed")
@click.option("--exact", is_flag=True, help="Enumerate every resample (tiny test sets only)")
@click.option("--json", "as_json", is_flag=True, help="Machine-readable output")
@click.argument("pred_a", type=click.Path(exists=True, dir_okay=False))
@click.argument("pred_b", type=click.Path(exists=True, dir_okay=False))
@click.argument("gold_path", type=click.Path(exists=True, dir_okay=False))
def cmd_significance(
    resamples: int, seed: int, exact: bool, as_json: bool, pred_a: str, pred_b: str, gold_path: str
) -> None:
    """2つのシステムの予測について、対応のあるブートストラップ検定を行う。"""
    a, b, gold = (_read_records_or_fail(path) for path in (pred_a, pred_b, gold_path))
    a, b, gold = ([record.targets for record in records] for records in (a, b, gold))

    try:
        if exact:
            result = exhaustive_significance(a, b, gold)
        else:
            result = bootstrap_significance(a, b, gold, resamples=resamples, seed=seed)
    except AlignmentError as e:
        raise InputError(str(e)) from e

    if as_json:
        click.echo(json.dumps(result.to_dict(), indent=2))
        return

    better = pred_a if result.better == "A" else pred_b
    click.echo(f"F1: A={result.f1_a:.4f} B={result.f1_b:.4f}")
    click.echo(f"better: {result.better} ({better})")
    click.echo(f"p: {result.p:.4f}")
    click.echo(f"resamples: {result.resamples}")


@cli.command(name="selfcheck")
@click.option("--seed", type=click.IntRange(min=0), default=DEFAULT_SEED, show_default=True, help="Random seed")
def cmd_selfcheck(seed: int) -> None:
    """勾配・確率分布・評価尺度・変換の不変条件を小さな例で検査する。"""
    results = run_selfcheck(seed)

    for result in results:
        status = click.style("ok  ", fg="green") if result.passed else click.style("FAIL", fg="red", bold=True)
        click.echo(f"{status} {result.name}: {result.detail}")

    failed = [result.name for result in results if not result.passed]
    if failed:
        raise InternalError(f"{len(failed)} of {len(results)} checks failed: {', '.join(failed)}")

    click.echo(f"all {len(results)} checks passed")


if __name__ == "__main__":
    cli()
