import pytest

from mvcells.phantom import PhantomSpec, generate_phantom, save_phantom


@pytest.fixture(scope="session")
def small_phantom():
    return generate_phantom(PhantomSpec(dims=(48, 48, 48), n_somata=40, rng_seed=7,
                                        attenuation_length=40))


@pytest.fixture(scope="session")
def phantom_dir(small_phantom, tmp_path_factory):
    path = tmp_path_factory.mktemp("phantom")
    save_phantom(small_phantom, str(path))
    return str(path)
