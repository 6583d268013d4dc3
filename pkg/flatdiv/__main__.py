from flatdiv.main import app

app(prog_name="flatdiv")
