"""ポインタネットワークによるエンドツーエンドの情報抽出（変換・学習・予測・評価）。"""

from importlib.metadata import version, PackageNotFoundError

try:
    # 指定したパッケージの定義（pyproject.toml）からバージョン番号を取得
    __version__ = version("e2eie")
except PackageNotFoundError:
    __version__ = "unknown"
