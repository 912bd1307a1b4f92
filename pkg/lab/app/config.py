from pydantic_settings import BaseSettings, SettingsConfigDict
import os


class Settings(BaseSettings):
    # Application Settings
    app_name: str = "USCS Segmentation Lab"

    # Output Settings
    output_root: str = "./runs"
    checkpoint_keep: int = 3

    # Worker Settings
    num_threads: int = 1

    # Logging
    log_level: str = "INFO"
    log_file: str = "./logs/lab.log"

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="USCS_",
        case_sensitive=False,
        extra="ignore",
    )

    @property
    def worker_count(self) -> int:
        return max(1, self.num_threads)


# Create settings instance
settings = Settings()

# Ensure directories exist
os.makedirs(os.path.dirname(settings.log_file) or ".", exist_ok=True)
