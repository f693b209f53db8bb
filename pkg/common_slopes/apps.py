from django.apps import AppConfig


class CommonSlopesConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "common_slopes"
    verbose_name = "Common slopes"
