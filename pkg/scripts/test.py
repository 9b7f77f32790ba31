#!/usr/bin/env python3
"""
Test runner script for the aseg project.

Usage:
    python scripts/test.py            # unit + integration, slow tests skipped
    python scripts/test.py unit
    python scripts/test.py slow
    python scripts/test.py benchmark  # pytest-benchmark timings only
    python scripts/test.py ci         # everything, with coverage reports
"""

import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def run_command(cmd, cwd=ROOT):
    """Run a command, echo its output and report success."""
    print(f"Running: {' '.join(cmd)}")
    result = subprocess.run(cmd, cwd=cwd, capture_output=True, text=True)
    if result.stdout:
        print(result.stdout)
    if result.returncode != 0:
        print(f"❌ Command failed with return code {result.returncode}")
        if result.stderr:
            print("STDERR:", result.stderr)
        return False
    print("✅ Command succeeded")
    return True


def pytest(*args):
    return run_command([sys.executable, "-m", "pytest", *args])


def unit_tests():
    print("🧪 Running unit tests...")
    return pytest("-m", "unit")


def integration_tests():
    print("🔗 Running integration tests...")
    return pytest("-m", "integration and not slow")


def slow_tests():
    print("🐢 Running slow end-to-end tests...")
    return pytest("-m", "slow")


def benchmark_tests():
    print("⚡ Running benchmarks...")
    return pytest("-m", "performance", "--benchmark-only")


def coverage_run():
    print("📊 Running the full suite with coverage...")
    return pytest("--cov=aseg", "--cov-report=xml", "--cov-report=term-missing")


COMMANDS = {
    "unit": unit_tests,
    "integration": integration_tests,
    "slow": slow_tests,
    "benchmark": benchmark_tests,
    "all": lambda: pytest("-m", "not slow", "--benchmark-disable"),
    "ci": coverage_run,
}


def main():
    command = sys.argv[1] if len(sys.argv) > 1 else "all"
    if command not in COMMANDS:
        print(f"Unknown command: {command}")
        print(f"Available commands: {', '.join(COMMANDS)}")
        return 1

    if COMMANDS[command]():
        print("🎉 All tests passed!")
        return 0
    print("💥 Some tests failed!")
    return 1


if __name__ == "__main__":
    sys.exit(main())
