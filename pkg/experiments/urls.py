# experiments/urls.py

from django.urls import path
from . import views

urlpatterns = [
    path('runs/', views.run_list, name='run_list'),
    path('runs/<int:pk>/report/', views.run_report, name='run_report'),
]
