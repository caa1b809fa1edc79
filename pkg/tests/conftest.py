import pytest

from echomil.dataset import DatasetManifest, SyntheticSpec, generate_synthetic_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Eight small videos (4 positive, 4 negative) shared across the suite."""
    root = tmp_path_factory.mktemp("tiny_data")
    spec = SyntheticSpec(
        num_positive=4, num_negative=4, frames_per_video=24, frame_size=64, seed=7
    )
    manifest = generate_synthetic_dataset(spec, root)
    return {"root": root, "spec": spec, "manifest": manifest}


@pytest.fixture(scope="session")
def medium_dataset(tmp_path_factory):
    """Sixty videos (30/30) for cross-validation and localization checks."""
    root = tmp_path_factory.mktemp("medium_data")
    spec = SyntheticSpec(
        num_positive=30, num_negative=30, frames_per_video=32, frame_size=96, seed=123
    )
    manifest = generate_synthetic_dataset(spec, root)
    return {"root": root, "spec": spec, "manifest": manifest}


@pytest.fixture
def announce(capsys):
    """Print a line through pytest's capture, for per-criterion verdicts."""

    def _announce(line: str) -> None:
        with capsys.disabled():
            print(line, flush=True)

    return _announce


def reload_manifest(info) -> DatasetManifest:
    return DatasetManifest.load_csv(info["root"] / "manifest.csv")
