if __name__ == "__main__":
    from . import main

    # "python -m e2eie"で実行した場合も、Usageにはコマンド名を表示する
    main.cli(prog_name="e2eie")
