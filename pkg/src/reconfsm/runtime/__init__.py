"""Live-cluster hosting: TCP transport, Command Queue, Configuration Manager, node CLI."""
