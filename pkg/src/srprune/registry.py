"""Named architecture registry.

Maps short names (``resnet56``, ``tiny-desk``...) to NetworkSpecs defined in
``arch_registry.yaml`` at the repo root.
"""

import os
from pathlib import Path
from typing import Any

import yaml

from srprune.errors import ConfigError
from srprune.schema import NetworkSpec

# Find the repo root directory (where arch_registry.yaml should be)
REPO_ROOT = Path(__file__).parent.parent.parent
REGISTRY_PATH = REPO_ROOT / "arch_registry.yaml"
_META_KEYS = ("name", "description")


def load_registry(path: Path | None = None) -> list[dict[str, Any]]:
    """Load registry entries.

    The ``SRPRUNE_ARCH_REGISTRY`` environment variable, when set, takes
    precedence over the bundled file.

    Returns:
        List of registry entries (empty if no registry can be read)

    """
    candidates = [path] if path is not None else []
    env_path = os.environ.get("SRPRUNE_ARCH_REGISTRY")
    if env_path:
        candidates.append(Path(env_path))
    candidates.append(REGISTRY_PATH)
    for candidate in candidates:
        try:
            with candidate.open() as f:
                return yaml.safe_load(f) or []
        except (FileNotFoundError, yaml.YAMLError):
            continue
    return []


def available(path: Path | None = None) -> list[str]:
    """Names of all registered architectures."""
    return [entry["name"] for entry in load_registry(path)]


def spec_for(name: str, path: Path | None = None) -> NetworkSpec:
    """Look up a registered architecture.

    Args:
        name: Registry name
        path: Optional registry file overriding the defaults

    Returns:
        The NetworkSpec for this name

    Raises:
        ConfigError: If the name is not registered

    """
    for entry in load_registry(path):
        if entry.get("name") == name:
            data = {k: v for k, v in entry.items() if k not in _META_KEYS}
            return NetworkSpec.from_dict(data)
    msg = f"Unknown architecture {name!r}; registered: {available(path)}"
    raise ConfigError(msg)
