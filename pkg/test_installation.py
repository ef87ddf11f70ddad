import sys
from pathlib import Path


def check_imports():
    """Check that the required packages can be imported."""
    print("Checking imports...")

    try:
        import numpy
        print(f"✅ NumPy {numpy.__version__}")
    except ImportError as e:
        print(f"❌ NumPy: {e}")
        return False

    try:
        import pandas
        print("✅ Pandas")
    except ImportError as e:
        print(f"❌ Pandas: {e}")
        return False

    try:
        from sklearn.model_selection import train_test_split
        print("✅ scikit-learn")
    except ImportError as e:
        print(f"❌ scikit-learn: {e}")
        return False

    try:
        from dotenv import load_dotenv
        print("✅ Python-dotenv")
    except ImportError as e:
        print(f"❌ Python-dotenv: {e}")
        return False

    try:
        import tomllib
        print("✅ tomllib")
    except ImportError:
        print("❌ tomllib (Python 3.11+ required)")
        return False

    try:
        import plotly
        print("✅ plotly")
    except ImportError:
        print("⚠️  plotly (optional, needed for eval --plot)")

    try:
        import pytest
        print("✅ pytest")
    except ImportError:
        print("⚠️  pytest (optional, needed for the test suite)")

    return True


def check_project_structure():
    """Check that the package and docs are in place."""
    print("\nChecking project structure...")

    required_files = ["requirements.txt", "README.md", "CONFIGURATION.md", "DESIGN.md"]
    required_modules = [
        "anytime_search/tensor.py",
        "anytime_search/operations.py",
        "anytime_search/genotype.py",
        "anytime_search/network.py",
        "anytime_search/search.py",
        "anytime_search/trainer.py",
        "anytime_search/evaluate.py",
        "anytime_search/cli.py",
    ]

    all_good = True
    for file_path in required_files + required_modules:
        if Path(file_path).exists():
            print(f"✅ {file_path}")
        else:
            print(f"❌ {file_path}")
            all_good = False
    return all_good


def check_module_imports():
    """Check that the package modules import."""
    print("\nChecking package modules...")

    try:
        from anytime_search.tensor import backward, conv2d
        print("✅ anytime_search.tensor")
    except ImportError as e:
        print(f"❌ anytime_search.tensor: {e}")
        return False

    try:
        from anytime_search.network import build_network, network_forward
        print("✅ anytime_search.network")
    except ImportError as e:
        print(f"❌ anytime_search.network: {e}")
        return False

    try:
        from anytime_search.search import run_search
        print("✅ anytime_search.search")
    except ImportError as e:
        print(f"❌ anytime_search.search: {e}")
        return False

    try:
        from anytime_search.cli import main
        print("✅ anytime_search.cli")
    except ImportError as e:
        print(f"❌ anytime_search.cli: {e}")
        return False

    return True


def check_basic_functionality():
    """Run a tiny network forward and a FLOPs count."""
    print("\nChecking basic functionality...")

    try:
        import numpy as np

        from anytime_search.flops import count_flops
        from anytime_search.genotype import Genotype
        from anytime_search.network import NetworkConfig, build_network, network_forward

        config = NetworkConfig(layers=3, scales=2, init_channels=4, nodes=2, early_exits=True,
                               num_classes=2, input_size=8, mode="discrete")
        net = build_network(config, genotype=Genotype.uniform(2, "sep_conv_3x3"))
        logits = network_forward(np.zeros((2, 3, 8, 8), dtype=np.float32), net)

        if len(logits) == 2 and logits[0].shape == (2, 2):
            print("✅ Network forward works")
        else:
            print("❌ Network forward failed")
            return False

        table = count_flops(net)
        print(f"✅ FLOPs per exit: {[round(m, 4) for m in table.mflops]} MFLOPS")
    except Exception as e:
        print(f"❌ Functionality check failed: {e}")
        return False

    return True


def main():
    """Run all checks."""
    print("Anytime Search - Installation Check")
    print("=" * 50)

    checks = [
        ("Import Dependencies", check_imports),
        ("Project Structure", check_project_structure),
        ("Module Imports", check_module_imports),
        ("Basic Functionality", check_basic_functionality),
    ]

    all_passed = True

    for name, check in checks:
        print(f"\n{name}:")
        print("-" * len(name))

        try:
            if check():
                print(f"✅ {name} PASSED")
            else:
                print(f"❌ {name} FAILED")
                all_passed = False
        except Exception as e:
            print(f"❌ {name} ERROR: {e}")
            all_passed = False

    print("\n" + "=" * 50)
    if all_passed:
        print("🎉 All checks passed! The installation is ready.")
        print("\nTo run the toy pipeline:")
        print("  python -m anytime_search search --preset toy --out-dir runs/toy-search")
    else:
        print("❌ Some checks failed. Please check the errors above.")
        print("\nTo install missing dependencies:")
        print("  pip install -r requirements.txt")

    return all_passed


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
