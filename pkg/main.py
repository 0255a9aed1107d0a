from app.backend.config.config import configure_logging
from app.backend.routers.cli import run


if __name__ == "__main__":
    configure_logging()
    raise SystemExit(run())
