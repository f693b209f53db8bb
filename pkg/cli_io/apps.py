from django.apps import AppConfig


class CliIoConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "cli_io"
    verbose_name = "Datasets, checkpoints and commands"
