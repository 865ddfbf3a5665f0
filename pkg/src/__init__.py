# LatentHarmonizer Package
