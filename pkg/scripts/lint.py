#!/usr/bin/env python3
"""
Linting and code quality script for the aseg project.

Usage:
    python scripts/lint.py           # black, isort, flake8 and mypy checks
    python scripts/lint.py format    # rewrite files with black and isort
    python scripts/lint.py security  # safety dependency audit and bandit scan
"""

import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
SOURCES = ["python/aseg", "python/tests", "scripts"]


def run_command(cmd, cwd=ROOT):
    """Run a command and return whether it succeeded."""
    print(f"Running: {' '.join(cmd)}")
    result = subprocess.run(cmd, cwd=cwd, capture_output=True, text=True)
    if result.returncode != 0:
        print(f"❌ Command failed with return code {result.returncode}")
        if result.stdout:
            print("STDOUT:", result.stdout)
        if result.stderr:
            print("STDERR:", result.stderr)
        return False
    print("✅ Command succeeded")
    if result.stdout:
        print(result.stdout)
    return True


def lint_python():
    """Run every check; report all failures, not just the first."""
    print("🐍 Linting Python code...")
    success = True

    print("🔧 Checking formatting (black)...")
    if not run_command([sys.executable, "-m", "black", "--check", *SOURCES]):
        print("❌ Black formatting issues found. Run 'python scripts/lint.py format'.")
        success = False

    print("📦 Checking import sorting (isort)...")
    if not run_command([sys.executable, "-m", "isort", "--check-only", *SOURCES]):
        print("❌ Import sorting issues found. Run 'python scripts/lint.py format'.")
        success = False

    print("🔍 Running flake8...")
    if not run_command([sys.executable, "-m", "flake8", "--max-line-length", "110", *SOURCES]):
        success = False

    print("🔬 Running mypy...")
    if not run_command([sys.executable, "-m", "mypy", "python/aseg"]):
        success = False

    return success


def security_audit():
    print("🔒 Running security audit...")
    success = True
    if not run_command([sys.executable, "-m", "safety", "check"]):
        print("❌ Python safety audit found issues.")
        success = False
    if not run_command([sys.executable, "-m", "bandit", "-r", "python/aseg"]):
        print("❌ Bandit security scan found issues.")
        success = False
    return success


def format_code():
    print("🎨 Auto-formatting code...")
    run_command([sys.executable, "-m", "black", *SOURCES])
    run_command([sys.executable, "-m", "isort", *SOURCES])
    print("✅ Code formatting completed!")


def main():
    command = sys.argv[1] if len(sys.argv) > 1 else "python"
    if command == "format":
        format_code()
        return 0
    if command == "security":
        return 0 if security_audit() else 1
    if command != "python":
        print(f"Unknown command: {command}")
        print("Available commands: python, format, security")
        return 1

    if lint_python():
        print("🎉 All linting checks passed!")
        return 0
    print("💥 Some linting checks failed!")
    return 1


if __name__ == "__main__":
    sys.exit(main())
