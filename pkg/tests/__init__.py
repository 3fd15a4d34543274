"""
Pacote de testes do projeto
"""

