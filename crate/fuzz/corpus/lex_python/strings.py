s = """a
  b""" + f"{x!r}" \
  + 0x1F
