from django.apps import AppConfig


class FreqDomainConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "freq_domain"
    verbose_name = "Frequency-sampled transfer functions"
