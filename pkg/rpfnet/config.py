from pathlib import Path
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    app_title: str = "rpfnet"
    data_dir: Path = Path(__file__).resolve().parent.parent / "data"
    output_dir: Path = Path(__file__).resolve().parent.parent / "output"

    host: str = "127.0.0.1"
    port: int = 8000

    # Interior-point solver
    solver_tolerance: float = 1e-8
    solver_max_iterations: int = 200
    solver_barrier_decrease: float = 0.2
    solver_initial_barrier: float = 1.0

    # Implicit differentiation.  A smallest singular value below
    # singular_threshold * ||M|| switches the adjoint solve to min-norm lstsq.
    singular_threshold: float = 1e-10
    tight_tolerance: float = 1e-6
    # Solutions with a larger KKT residual are refused by build_kkt_matrix
    kkt_build_threshold: float = 1e-5

    feasibility_tolerance: float = 1e-6

    # Misreport search (evaluation grade)
    search_steps: int = 50
    search_step_size: float = 0.05
    search_restarts: int = 5

    # Box limits of the value / demand type spaces
    value_low: float = 0.1
    value_high: float = 1.0
    demand_low: float = 0.1
    demand_high: float = 1.0

    # Network z_w
    hidden_width: int = 128
    hidden_layers: int = 2

    # Worker processes for per-sample evaluation; 1 keeps everything in-process
    workers: int = 1

    class Config:
        env_file = ".env"
        env_prefix = "RPF_"


settings = Settings()
settings.data_dir.mkdir(parents=True, exist_ok=True)
settings.output_dir.mkdir(parents=True, exist_ok=True)
