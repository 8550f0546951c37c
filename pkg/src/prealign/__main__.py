"""Allows to run via python -m prealign"""


def main():
    import runez

    from prealign.cli import main
    from prealign.reports import SoftLockException

    runez.click.protected_main(main, no_stacktrace=[SoftLockException])


if __name__ == "__main__":
    main()
