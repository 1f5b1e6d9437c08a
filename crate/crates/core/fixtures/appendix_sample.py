import bpy
from HumGen3D import Human

my_human = Human.from_preset("models/female/Hispanic/Tara.json")
# Customizing body shape
for key in my_human.body.keys:
    if key.name == "Neck Length":
        key.value = 0.5
    ...
# Customizing facial features
for key in my_human.face.keys:
    if key.name == "eye_tilt":
        key.value = 0.05
    ...
# Set height
my_human.height.set(value_cm=165)

# Set age
my_human.age.set(32, realtime=False)

# Set hair
my_human.hair.set_hair_quality("high")
my_human.hair.update_hair_shader_type("accurate")
my_human.hair.regular_hair.set("hair/head/female/Long/Bun.json")
# Blonde
my_human.hair.regular_hair.hue.value            = 0.55
my_human.hair.regular_hair.lightness.value      = 3.00
my_human.hair.regular_hair.redness.value        = 1.00

# Set skin texture
my_human.skin.texture.set("textures/female/Default 4K/Female 07.png")  # Medium-deep warm tone
