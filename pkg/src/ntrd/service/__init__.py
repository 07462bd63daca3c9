from .app import app_from_checkpoint, create_app

__all__ = ["app_from_checkpoint", "create_app"]
