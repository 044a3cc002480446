from .config import RunConfig, config_hash, load_config  # noqa: F401
from .bench import bench_wrappers  # noqa: F401
