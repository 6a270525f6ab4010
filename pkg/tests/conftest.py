import numpy as np
import pytest

from xspod.geometry import AcquisitionGeometry
from xspod.phantom import CylinderSpec, EllipsoidCavity, Phantom
from xspod.physics import Material, Spectrum, bundled_material, kramers_spectrum


@pytest.fixture(scope="session")
def geometry():
    return AcquisitionGeometry()


@pytest.fixture(scope="session")
def small_geometry():
    # same magnification as the default, 60 x 60 pixels
    return AcquisitionGeometry.from_detector(200.0, 300.0, 18.0, 18.0, 0.3)


@pytest.fixture(scope="session")
def pmma():
    return bundled_material("pmma")


@pytest.fixture(scope="session")
def aluminum():
    return bundled_material("aluminum")


@pytest.fixture(scope="session")
def iron():
    return bundled_material("iron")


@pytest.fixture(scope="session")
def kramers90():
    return kramers_spectrum(90)


def mono(energy):
    return Spectrum(np.array([float(energy)]), np.array([1.0]))


def flat_material(mu_pe, mu_co, mu_ra, name="flat", density=1.0):
    """Material whose linear coefficients (1/mm) are constant in energy."""
    e = np.array([1.0, 1000.0])
    cols = [np.full(2, 10.0 * m / density) for m in (mu_pe, mu_co, mu_ra)]
    return Material(name, density, np.column_stack([e, *cols]))


def cylinder(radius, height, cavity_center=(0.0, 0.0, 0.0), semi_axes=(0.0, 0.0, 0.0), material="pmma", pid=0):
    return Phantom(pid, CylinderSpec(radius, height, material), EllipsoidCavity(cavity_center, semi_axes))
