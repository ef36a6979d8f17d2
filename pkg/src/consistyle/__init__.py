"""Desk-scale consistent-subject, style-diverse generation via attention intervention."""
