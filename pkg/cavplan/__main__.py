"""
Entry point for `python -m cavplan`.
"""

from .cli import main

if __name__ == "__main__":
    main()
