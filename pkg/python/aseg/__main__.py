"""Allow running aseg as a module: python -m aseg"""
import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
