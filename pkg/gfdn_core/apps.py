from django.apps import AppConfig


class GfdnCoreConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "gfdn_core"
    verbose_name = "GFDN runtime"
