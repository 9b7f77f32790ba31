#!/usr/bin/env python3
"""
Build script for the aseg project.

Usage:
    python scripts/build.py          # clean, build sdist + wheel into dist/
    python scripts/build.py smoke    # build, then run the CLI on a tiny synthetic run
"""

import json
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent

SMOKE_RUN = {
    "model": {
        "encoder": {"width_multiplier": 0.03125, "units": [1, 1, 1, 1]},
        "easpp": {"dropout": 0.0},
        "num_classes": 3,
        "skip_channels": 4,
    },
    "data": {"n_samples": 6, "spec": {"num_classes": 3, "height": 32, "width": 32, "val_fraction": 0.34}},
    "schedule": {"stages": [{"iterations": 2, "encoder_lr": 0.001, "decoder_lr": 0.001, "batch_size": 2}]},
    "logging": {"level": "warning"},
}


def run_command(cmd, cwd=ROOT):
    """Run a command, raising on failure."""
    print(f"Running: {' '.join(cmd)}")
    result = subprocess.run(cmd, cwd=cwd, check=True, capture_output=True, text=True)
    if result.stdout:
        print(result.stdout)
    if result.stderr:
        print(result.stderr, file=sys.stderr)
    return result


def build_python():
    """Build the sdist and wheel."""
    print("🐍 Building Python package...")
    try:
        for pattern in ["build", "dist", "python/*.egg-info"]:
            for path in ROOT.glob(pattern):
                if path.is_dir():
                    shutil.rmtree(path)
                    print(f"🧹 Cleaned {path}")
        run_command([sys.executable, "-m", "build"])
        print("✅ Python package built successfully!")
        return True
    except subprocess.CalledProcessError as e:
        print(f"❌ Python build failed: {e}")
        return False


def smoke_run():
    """gen-data, train and eval through ``python -m aseg`` in a scratch directory."""
    print("💨 Running CLI smoke test...")
    with tempfile.TemporaryDirectory() as tmp:
        base = Path(tmp)
        config = base / "run.json"
        config.write_text(json.dumps(SMOKE_RUN))
        data = base / "data"
        steps = [
            ["gen-data", "--out", str(data)],
            ["train", "--out", str(base / "train"), "--override", f"data.manifest={data}"],
            ["eval", "--out", str(base / "eval"), "--override", f"data.manifest={data}",
             "--override", f"eval.checkpoint={base / 'train' / 'final.aseg'}"],
        ]
        try:
            for step in steps:
                run_command([sys.executable, "-m", "aseg", step[0], "--config", str(config), *step[1:]],
                            cwd=ROOT / "python")
        except subprocess.CalledProcessError as e:
            print(f"❌ Smoke run failed: {e}")
            return False
    print("✅ Smoke run passed!")
    return True


def main():
    print("🚀 Starting aseg build process...")
    command = sys.argv[1] if len(sys.argv) > 1 else "python"
    if command == "python":
        success = build_python()
    elif command == "smoke":
        success = build_python() and smoke_run()
    else:
        print(f"Unknown command: {command}")
        print("Available commands: python, smoke")
        return 1

    if success:
        print("🎉 Build completed successfully!")
        return 0
    print("💥 Build failed!")
    return 1


if __name__ == "__main__":
    sys.exit(main())
