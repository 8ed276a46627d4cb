"""Entry point for: python -m lutnet"""

from .cli import run

if __name__ == "__main__":
    run()
