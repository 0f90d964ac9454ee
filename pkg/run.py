#!/usr/bin/env python3
"""
Quick start script for TriPLET
Builds the desk-scale dataset (if missing) and runs the default training
"""

import os
import subprocess
import sys
from pathlib import Path

try:
    import colorama
    colorama.just_fix_windows_console()
except ImportError:
    colorama = None


def get_workspace():
    """Get workspace from: 1) TRIPLET_WORKSPACE env var, 2) config.yaml, 3) default ./workspace."""
    if os.getenv("TRIPLET_WORKSPACE"):
        return os.getenv("TRIPLET_WORKSPACE")
    config_path = Path("config.yaml")
    if config_path.exists():
        try:
            import yaml
            with open(config_path, "r", encoding="utf-8") as f:
                cfg = yaml.safe_load(f) or {}
                return str(cfg.get("workspace", "./workspace"))
        except Exception:
            pass
    return "./workspace"


def main():
    try:
        import numpy  # noqa: F401
        import scipy  # noqa: F401
        import pydantic  # noqa: F401
    except ImportError:
        print("Installing dependencies...")
        subprocess.check_call([sys.executable, "-m", "pip", "install", "-r", "requirements.txt"])

    workspace = get_workspace()
    print(f"TriPLET desk run -> {workspace}  (Ctrl+C to stop)")
    print()

    for command in (["simulate"], ["train", "--preset", "desk"]):
        if command[0] == "simulate" and (Path(workspace) / "dataset" / "manifest.json").exists():
            print(f"Dataset already present in {workspace}/dataset, skipping simulation")
            continue
        status = subprocess.call([sys.executable, "-m", "triplet", *command, "--out", workspace])
        if status != 0:
            sys.exit(status)


if __name__ == "__main__":
    main()
