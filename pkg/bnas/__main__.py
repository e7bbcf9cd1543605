"""Module entry for python -m bnas"""
from .cli import main


if __name__ == "__main__":
    raise SystemExit(main())
