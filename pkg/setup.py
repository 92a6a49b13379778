#!/usr/bin/env python3
"""
Evidence Transfer Experiments - Setup Script
Installs the numerical stack and writes a default experiment config.
"""

import sys
import subprocess
from pathlib import Path

SCRIPT_DIR = Path(__file__).resolve().parent
REQUIREMENTS = SCRIPT_DIR / "requirements.txt"

# pip name -> import name
PACKAGES = {
    "pydantic": "pydantic",
    "numpy": "numpy",
    "scipy": "scipy",
    "scikit-learn": "sklearn",
    "imbalanced-learn": "imblearn",
    "joblib": "joblib",
    "pytest": "pytest",
}


def print_step(step, message):
    """Print formatted step message."""
    print(f"\n{'='*60}")
    print(f"Step {step}: {message}")
    print(f"{'='*60}")


def run_command(cmd, description, ignore_errors=False):
    """Run a shell command and handle errors."""
    print(f"\n→ {description}...")
    try:
        result = subprocess.run(
            cmd,
            shell=True,
            capture_output=True,
            text=True,
            timeout=600
        )

        if result.returncode != 0 and not ignore_errors:
            print(f"  ⚠️  Warning: {description} had issues")
            if result.stderr:
                print(f"     {result.stderr[:200]}")
            return False
        print(f"  ✅ {description} complete")
        return True
    except subprocess.TimeoutExpired:
        print(f"  ⚠️  Warning: {description} timed out")
        return False
    except Exception as e:
        print(f"  ⚠️  Warning: {description} failed - {str(e)}")
        return False


def check_python_version():
    """Check if Python version is compatible."""
    version = sys.version_info
    if version < (3, 9):
        print(f"❌ Python {version.major}.{version.minor} is too old")
        print("   This project requires Python 3.9 or newer")
        return False
    print(f"✅ Python {version.major}.{version.minor}.{version.micro}")
    return True


def install_python_packages():
    """Install the packages pinned in requirements.txt."""
    print_step(1, "Installing Python Dependencies")

    print("Required packages:")
    for line in REQUIREMENTS.read_text().splitlines():
        if line.strip():
            print(f"  • {line.strip()}")

    pip_cmd = f"{sys.executable} -m pip"
    success = run_command(f"{pip_cmd} install -r {REQUIREMENTS}", "Install Python packages")

    if not success:
        # Distribution-managed interpreters refuse plain installs
        success = run_command(f"{pip_cmd} install --break-system-packages -r {REQUIREMENTS}",
                              "Install Python packages (retry with --break-system-packages)")

    if not success:
        print("\n⚠️  Automatic installation had issues. You may need to install manually:")
        print(f"   pip3 install -r {REQUIREMENTS}")
    return success


def setup_config_file():
    """Write the default experiment config if none exists."""
    print_step(2, "Configuration Setup")

    sys.path.insert(0, str(SCRIPT_DIR / "scripts"))
    try:
        from config import DEFAULT_CONFIG_PATH, ExperimentConfig, load_config, save_config
    except ImportError as e:
        print(f"  ⚠️  Cannot import the config module ({e}); install the dependencies first")
        return False

    if DEFAULT_CONFIG_PATH.exists():
        try:
            load_config(DEFAULT_CONFIG_PATH)
            print(f"  ✅ Config file already exists and validates: {DEFAULT_CONFIG_PATH}")
            return True
        except Exception as e:
            print(f"  ⚠️  Existing config does not validate: {e}")
            print("     Fix it by hand or delete it and rerun setup")
            return False

    save_config(ExperimentConfig(), DEFAULT_CONFIG_PATH)
    print(f"  ✅ Created config template: {DEFAULT_CONFIG_PATH}")
    print("\n  📝 Next Steps:")
    print("     1. The template runs the synthetic benchmark as-is")
    print(f"     2. To use real data, edit {DEFAULT_CONFIG_PATH} and replace the")
    print("        \"synth\" section with \"features\" and \"catalog\" paths")
    print(f"     3. See {SCRIPT_DIR / 'references'} for rotation and file-based examples")
    return True


def verify_installation():
    """Verify that every package imports."""
    print_step(3, "Verification")

    all_good = True
    print("\n→ Checking Python packages...")
    for pkg_name, import_name in PACKAGES.items():
        try:
            __import__(import_name)
            print(f"  ✅ {pkg_name}")
        except ImportError:
            print(f"  ❌ {pkg_name} - Not installed")
            all_good = False
    return all_good


def main():
    """Main setup routine."""
    print("\nEvidence Transfer Experiments - Setup")
    print("="*60)

    if not check_python_version():
        sys.exit(1)

    install_python_packages()
    config_ok = setup_config_file()

    print("\n")
    all_good = verify_installation() and config_ok

    print("\n" + "="*60)
    if all_good:
        print("✅ SETUP COMPLETE")
        print("="*60)
        print("\nRun the synthetic benchmark with:")
        print(f"  python3 {SCRIPT_DIR / 'scripts' / 'run_experiment.py'} run")
    else:
        print("⚠️  SETUP INCOMPLETE")
        print("="*60)
        print("\n⚠️  Some components need manual setup.")
        print("   Review the messages above and follow the instructions.")

    print("\n" + "="*60 + "\n")
    return 0 if all_good else 1


# Build backends (pip install / python -m build) invoke this file with setuptools
# commands; hand those to setuptools, which reads its metadata from pyproject.toml.
_SETUPTOOLS_COMMANDS = {"egg_info", "dist_info", "editable_wheel", "bdist_wheel",
                        "sdist", "build", "build_py", "develop", "install"}

if __name__ == "__main__":
    if _SETUPTOOLS_COMMANDS.intersection(sys.argv[1:]):
        from setuptools import setup
        setup()
    else:
        sys.exit(main())
