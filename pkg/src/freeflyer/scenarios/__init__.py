"""Shipped scenario files."""

from importlib import resources

from ..errors import ScenarioError


def scenario_path(name):
    """Filesystem path of a shipped scenario file by bare name."""
    if not name.endswith(".yaml"):
        name = name + ".yaml"
    ref = resources.files(__package__).joinpath(name)
    if not ref.is_file():
        shipped = sorted(p.name for p in resources.files(__package__).iterdir()
                         if p.name.endswith(".yaml"))
        raise ScenarioError(f"no shipped scenario '{name}' (have: {shipped})")
    return str(ref)
